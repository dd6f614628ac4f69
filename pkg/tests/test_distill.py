"""Cross entropy, distillation loss, teacher building, experiment runs."""

import numpy as np
import pytest

from lesionforge.checkpoint import save_checkpoint
from lesionforge.data import make_toy_dataset
from lesionforge.distill import (
    ExperimentPlan,
    KDConfig,
    MetricsReport,
    TrainProtocol,
    build_teacher,
    cross_entropy,
    kd_loss,
    load_teacher,
    run_experiment,
    save_teacher,
    train_classifier,
)
from lesionforge.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    TrainingError,
)
from lesionforge.mae import MAEConfig, build_mae, mae_checkpoint_config
from lesionforge.models import ViTConfig, build_vit
from lesionforge.rng import RngState
from lesionforge.tensor import Tensor

ENC = ViTConfig(
    image_size=16, patch_size=4, dim=16, depth=1, heads=2, num_classes=0
)
TINY_MAE = MAEConfig(encoder=ENC, decoder_heads=2)


def tiny_student(num_classes: int = 2) -> ViTConfig:
    return ViTConfig(
        image_size=16, patch_size=4, dim=16, depth=1, heads=2,
        num_classes=num_classes,
    )


def save_tiny_mae(path) -> None:
    model = build_mae(TINY_MAE, RngState(11))
    save_checkpoint(
        path, model.store, model_kind="mae",
        config=mae_checkpoint_config(TINY_MAE),
    )


# -- cross entropy ---------------------------------------------------------


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        for c in (2, 5, 9):
            logits = np.zeros((4, c))
            loss = cross_entropy(logits, np.zeros(4, dtype=int))
            assert abs(loss.data - np.log(c)) < 1e-12

    def test_hand_oracle(self):
        loss = cross_entropy(np.array([[1.0, 2.0, 3.0]]), [2])
        assert abs(loss.data - 0.4076059644443806) < 1e-12

    def test_confident_correct_logit_is_near_zero(self):
        logits = np.array([[1e6, 0.0, 0.0]])
        loss = cross_entropy(logits, [0])
        assert 0.0 <= float(loss.data) < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        a = cross_entropy(logits, labels).data
        b = cross_entropy(logits + 1000.0, labels).data
        assert abs(a - b) < 1e-10

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        labels = rng.integers(0, 3, size=5)
        cross_entropy(logits, labels).backward()
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.eye(3)[labels]
        assert np.allclose(logits.grad, (p - onehot) / 5.0, atol=1e-12)

    def test_out_of_range_label_names_the_record(self):
        with pytest.raises(DataError, match="record 1"):
            cross_entropy(np.zeros((3, 4)), [0, 7, 1])
        with pytest.raises(DataError, match="record 2"):
            cross_entropy(np.zeros((3, 4)), [0, 1, -1])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            cross_entropy(np.zeros((3, 4)), [0, 1])
        with pytest.raises(ContractError):
            cross_entropy(np.zeros(4), [0])


# -- kd config and loss ----------------------------------------------------


class TestKDConfig:
    def test_defaults(self):
        cfg = KDConfig()
        assert cfg.alpha == 0.5 and cfg.temperature == 2.0

    @pytest.mark.parametrize("alpha", [-0.1, 1.0001, 2.0])
    def test_alpha_range(self, alpha):
        with pytest.raises(ConfigError):
            KDConfig(alpha=alpha)

    @pytest.mark.parametrize("temp", [0.0, -1.0])
    def test_temperature_positive(self, temp):
        with pytest.raises(ConfigError):
            KDConfig(temperature=temp)


def random_logits(seed: int, shape=(6, 4)):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape), rng.normal(size=shape)


class TestKDLoss:
    def test_hand_oracle_two_classes(self):
        # teacher [0, ln 2] -> p_t = (1/3, 2/3); uniform student -> (1/2, 1/2)
        teacher = np.array([[0.0, np.log(2.0)]])
        student = Tensor(np.zeros((1, 2)), requires_grad=True)
        cfg = KDConfig(alpha=1.0, temperature=1.0)
        loss, parts = kd_loss(student, teacher, [1], cfg)
        assert abs(parts["kl"] - 0.0566330122651324) < 1e-10
        assert abs(loss.data - parts["kl"]) < 1e-15
        assert abs(parts["ce"] - np.log(2.0)) < 1e-12

    def test_alpha_zero_is_cross_entropy_bit_exact(self):
        s_np, t_np = random_logits(0)
        labels = np.arange(6) % 4
        student = Tensor(s_np, requires_grad=True)
        loss, parts = kd_loss(
            student, t_np, labels, KDConfig(alpha=0.0, temperature=3.0)
        )
        ce = cross_entropy(Tensor(s_np), labels)
        assert float(loss.data) == float(ce.data)
        assert parts["kl"] > 0.0  # still measured and reported

    def test_alpha_zero_gradient_matches_plain_ce(self):
        s_np, t_np = random_logits(1)
        labels = np.arange(6) % 4
        a = Tensor(s_np.copy(), requires_grad=True)
        loss, _ = kd_loss(a, t_np, labels, KDConfig(alpha=0.0))
        loss.backward()
        b = Tensor(s_np.copy(), requires_grad=True)
        cross_entropy(b, labels).backward()
        assert np.array_equal(a.grad, b.grad)

    def test_matching_logits_zero_kl(self):
        s_np, _ = random_logits(2)
        loss, parts = kd_loss(
            Tensor(s_np), s_np.copy(), np.zeros(6, dtype=int),
            KDConfig(alpha=1.0, temperature=2.0),
        )
        assert parts["kl"] == 0.0
        assert float(loss.data) == 0.0

    def test_kl_gradient_vanishes_at_match(self):
        s_np, _ = random_logits(3)
        student = Tensor(s_np.copy(), requires_grad=True)
        loss, _ = kd_loss(
            student, s_np.copy(), np.zeros(6, dtype=int),
            KDConfig(alpha=1.0, temperature=2.0),
        )
        loss.backward()
        assert np.all(np.abs(student.grad) < 1e-12)

    def test_teacher_receives_no_gradient(self):
        s_np, t_np = random_logits(4)
        teacher = Tensor(t_np, requires_grad=True)
        student = Tensor(s_np, requires_grad=True)
        loss, _ = kd_loss(student, teacher, np.zeros(6, dtype=int), KDConfig())
        loss.backward()
        assert teacher.grad is None or np.all(teacher.grad == 0.0)
        assert student.grad is not None and np.any(student.grad != 0.0)

    @pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.8, 1.0])
    def test_linear_in_alpha(self, alpha):
        s_np, t_np = random_logits(5)
        labels = np.arange(6) % 4
        base = KDConfig(alpha=0.5, temperature=2.0)
        _, parts = kd_loss(Tensor(s_np), t_np, labels, base)
        loss, _ = kd_loss(
            Tensor(s_np), t_np, labels, KDConfig(alpha=alpha, temperature=2.0)
        )
        expected = (1.0 - alpha) * parts["ce"] + alpha * parts["kl"]
        assert abs(float(loss.data) - expected) < 1e-12

    def test_shift_invariance(self):
        s_np, t_np = random_logits(6)
        labels = np.arange(6) % 4
        cfg = KDConfig(alpha=0.7, temperature=2.0)
        a, _ = kd_loss(Tensor(s_np), t_np, labels, cfg)
        b, _ = kd_loss(Tensor(s_np + 123.0), t_np - 77.0, labels, cfg)
        assert abs(float(a.data) - float(b.data)) < 1e-10

    def test_kl_matches_independent_computation(self):
        for seed in range(5):
            s_np, t_np = random_logits(seed, shape=(4, 5))
            cfg = KDConfig(alpha=1.0, temperature=2.0)
            _, parts = kd_loss(
                Tensor(s_np), t_np, np.zeros(4, dtype=int), cfg
            )

            def log_softmax(x):
                z = x - x.max(axis=1, keepdims=True)
                return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

            lp_t = log_softmax(t_np / cfg.temperature)
            lp_s = log_softmax(s_np / cfg.temperature)
            ref = np.mean(
                (np.exp(lp_t) * (lp_t - lp_s)).sum(axis=1)
            ) * cfg.temperature ** 2
            assert abs(parts["kl"] - ref) < 1e-12

    def test_gradient_against_finite_differences(self):
        s_np, t_np = random_logits(7, shape=(3, 4))
        labels = np.array([0, 2, 3])
        cfg = KDConfig(alpha=0.6, temperature=2.0)
        student = Tensor(s_np.copy(), requires_grad=True)
        loss, _ = kd_loss(student, t_np, labels, cfg)
        loss.backward()
        eps = 1e-6
        for idx in [(0, 0), (1, 2), (2, 3), (0, 3)]:
            plus = s_np.copy()
            plus[idx] += eps
            minus = s_np.copy()
            minus[idx] -= eps
            lp, _ = kd_loss(Tensor(plus), t_np, labels, cfg)
            lm, _ = kd_loss(Tensor(minus), t_np, labels, cfg)
            fd = (float(lp.data) - float(lm.data)) / (2 * eps)
            assert abs(fd - student.grad[idx]) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            kd_loss(
                Tensor(np.zeros((2, 3))), np.zeros((2, 4)), [0, 1], KDConfig()
            )


# -- teacher construction ---------------------------------------------------


class TestBuildTeacher:
    def test_encoder_tensors_copied_exactly(self, tmp_path):
        ckpt = tmp_path / "mae.ckpt"
        model = build_mae(TINY_MAE, RngState(11))
        save_checkpoint(
            ckpt, model.store, model_kind="mae",
            config=mae_checkpoint_config(TINY_MAE),
        )
        teacher = build_teacher(ckpt, num_classes=5)
        assert teacher.cfg.num_classes == 5
        for name in ("patch_embed.weight", "pos_embed", "blocks.0.attn.qkv.weight"):
            assert np.array_equal(
                teacher.store[name].data,
                model.store[f"encoder.{name}"].data,
            )

    def test_zero_head_gives_uniform_logits(self, tmp_path):
        ckpt = tmp_path / "mae.ckpt"
        save_tiny_mae(ckpt)
        teacher = build_teacher(ckpt, num_classes=4)
        images = np.random.default_rng(0).uniform(size=(2, 3, 16, 16))
        logits = teacher(Tensor(images))
        assert np.allclose(logits.data, logits.data[:, :1], atol=1e-12)

    def test_normal_head_breaks_ties(self, tmp_path):
        ckpt = tmp_path / "mae.ckpt"
        save_tiny_mae(ckpt)
        teacher = build_teacher(ckpt, num_classes=4, head_init="normal")
        assert np.any(teacher.store["head.weight"].data != 0.0)

    def test_bad_head_init_rejected(self, tmp_path):
        ckpt = tmp_path / "mae.ckpt"
        save_tiny_mae(ckpt)
        with pytest.raises(ConfigError, match="head init"):
            build_teacher(ckpt, num_classes=3, head_init="xavier")

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "vit.ckpt"
        save_teacher(path, build_vit(tiny_student(3), RngState(0)))
        with pytest.raises(CheckpointError):
            build_teacher(path, num_classes=3)

    def test_teacher_round_trip_bitwise(self, tmp_path):
        ckpt = tmp_path / "mae.ckpt"
        save_tiny_mae(ckpt)
        teacher = build_teacher(ckpt, num_classes=3, head_init="normal")
        path = tmp_path / "teacher.ckpt"
        save_teacher(path, teacher)
        again = load_teacher(path)
        images = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
        a = teacher(Tensor(images)).data
        b = again(Tensor(images)).data
        assert np.array_equal(a, b)


# -- experiment plans --------------------------------------------------------


class TestExperimentPlan:
    def test_unknown_fields_rejected(self):
        with pytest.raises(ConfigError, match="variant"):
            ExperimentPlan(variant="newfangled", student_config=tiny_student())
        with pytest.raises(ConfigError, match="data mode"):
            ExperimentPlan(
                variant="baseline", student_config=tiny_student(),
                data_mode="dreams",
            )
        with pytest.raises(ConfigError, match="task"):
            ExperimentPlan(
                variant="baseline", student_config=tiny_student(),
                task="regression",
            )

    def test_distill_needs_teacher_checkpoint(self):
        with pytest.raises(ConfigError, match="teacher"):
            ExperimentPlan(variant="distill", student_config=tiny_student())

    def test_synth_modes_need_diffusion_checkpoint(self):
        for mode in ("real+synth-conditional", "real+synth-unconditional"):
            with pytest.raises(ConfigError, match="diffusion"):
                ExperimentPlan(
                    variant="baseline", student_config=tiny_student(),
                    data_mode=mode,
                )

    def test_mae_finetune_needs_checkpoint(self):
        with pytest.raises(ConfigError, match="MAE"):
            ExperimentPlan(variant="mae-finetune", student_config=tiny_student())

    def test_missing_checkpoint_file_fails_before_training(self, tmp_path):
        plan = ExperimentPlan(
            variant="distill", student_config=tiny_student(),
            teacher_checkpoint=str(tmp_path / "nope.ckpt"),
        )
        data = make_toy_dataset([4, 4], image_size=16, seed=0)
        with pytest.raises(ConfigError, match="not found"):
            run_experiment(plan, data, data, RngState(0))


# -- training runs ------------------------------------------------------------


def toy_splits(seed: int = 0):
    train = make_toy_dataset([24, 24], image_size=16, seed=seed)
    evald = make_toy_dataset([12, 12], image_size=16, seed=seed + 100)
    return train, evald


FAST = TrainProtocol(epochs=20, lr=1e-3, batch_size=16)


class TestRunExperiment:
    def test_baseline_learns_separable_toy_data(self):
        train, evald = toy_splits()
        plan = ExperimentPlan(variant="baseline", student_config=tiny_student())
        report = run_experiment(plan, train, evald, RngState(7), protocol=FAST)
        assert report.value("categorical", "accuracy") >= 0.75
        losses = [h["loss"] for h in report.history]
        assert losses[-1] < losses[0]

    def test_report_rows_and_header(self):
        train, evald = toy_splits(1)
        plan = ExperimentPlan(variant="baseline", student_config=tiny_student())
        report = run_experiment(plan, train, evald, RngState(3), protocol=FAST)
        tasks = {(r["task"], r["metric"]) for r in report.rows}
        assert ("categorical", "accuracy") in tasks
        assert ("categorical", "macro_f1") in tasks
        assert ("categorical", "weighted_f1") in tasks
        assert ("binary", "malignant_f1") in tasks
        assert all(r["variant"] == "baseline" for r in report.rows)
        for key in ("epochs", "lr", "batch_size", "weight_decay"):
            assert key in report.header
        assert report.header["epochs"] == 20
        rows = report.csv_rows()
        assert all(len(r) == 4 for r in rows)
        assert "baseline" in report.table()

    def test_default_protocol_echoes_reference_recipe(self):
        p = TrainProtocol()
        assert (p.epochs, p.lr, p.batch_size, p.weight_decay) == (
            1000, 3e-5, 64, 0.01,
        )

    def test_distill_alpha_zero_reproduces_finetune_curve(self, tmp_path):
        mae_ckpt = tmp_path / "mae.ckpt"
        save_tiny_mae(mae_ckpt)
        teacher = build_teacher(mae_ckpt, num_classes=2, head_init="normal")
        teacher_ckpt = tmp_path / "teacher.ckpt"
        save_teacher(teacher_ckpt, teacher)
        train, evald = toy_splits(2)
        proto = TrainProtocol(epochs=6, lr=1e-3, batch_size=16)

        finetune = ExperimentPlan(
            variant="mae-finetune", student_config=tiny_student(),
            mae_checkpoint=str(mae_ckpt),
        )
        distill = ExperimentPlan(
            variant="distill", student_config=tiny_student(),
            student_init="mae-encoder", mae_checkpoint=str(mae_ckpt),
            teacher_checkpoint=str(teacher_ckpt),
            kd=KDConfig(alpha=0.0, temperature=2.0),
        )
        a = run_experiment(finetune, train, evald, RngState(5), protocol=proto)
        b = run_experiment(distill, train, evald, RngState(5), protocol=proto)
        assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
        for row_a, row_b in zip(a.rows, b.rows):
            assert row_a["metric"] == row_b["metric"]
            assert row_a["value"] == row_b["value"]

    def test_distill_with_soft_targets_runs(self, tmp_path):
        mae_ckpt = tmp_path / "mae.ckpt"
        save_tiny_mae(mae_ckpt)
        teacher = build_teacher(mae_ckpt, num_classes=2, head_init="normal")
        teacher_ckpt = tmp_path / "teacher.ckpt"
        save_teacher(teacher_ckpt, teacher)
        train, evald = toy_splits(3)
        plan = ExperimentPlan(
            variant="distill", student_config=tiny_student(),
            teacher_checkpoint=str(teacher_ckpt),
            kd=KDConfig(alpha=0.5, temperature=2.0),
        )
        proto = TrainProtocol(epochs=4, lr=1e-3, batch_size=16)
        report = run_experiment(plan, train, evald, RngState(9), protocol=proto)
        assert all(np.isfinite(h["loss"]) for h in report.history)
        assert "kl" in report.history[0]
        assert report.header["alpha"] == 0.5

    def test_binary_head_plan(self):
        train = make_toy_dataset([12, 8, 8, 6], image_size=16, seed=4)
        evald = make_toy_dataset([6, 4, 4, 4], image_size=16, seed=104)
        plan = ExperimentPlan(
            variant="baseline", student_config=tiny_student(2), task="binary",
        )
        proto = TrainProtocol(epochs=4, lr=1e-3, batch_size=16)
        report = run_experiment(plan, train, evald, RngState(2), protocol=proto)
        tasks = {r["task"] for r in report.rows}
        assert tasks == {"binary"}
        assert 0.0 <= report.value("binary", "malignant_f1") <= 1.0

    def test_binary_plan_requires_two_class_head(self):
        train, evald = toy_splits(5)
        plan = ExperimentPlan(
            variant="baseline", student_config=tiny_student(4), task="binary",
        )
        with pytest.raises(ConfigError, match="2-class"):
            run_experiment(plan, train, evald, RngState(0), protocol=FAST)

    def test_empty_dataset_rejected(self):
        train, _ = toy_splits(6)
        model = build_vit(tiny_student(), RngState(0))
        with pytest.raises(TrainingError):
            train_classifier(model, train.subset(np.array([], dtype=int)),
                             FAST, RngState(0))

    def test_missing_metric_lookup_raises(self):
        report = MetricsReport(
            variant="baseline", header={}, rows=[], history=[]
        )
        with pytest.raises(KeyError):
            report.value("categorical", "accuracy")
