"""The full chain at miniature scale: synthesize, pretrain, distill, compare.

A scaled-down version of the end-to-end experiment: a class-conditional
denoiser rebalances an imbalanced toy dataset, an MAE pretrains on the
merged corpus, its encoder becomes a fine-tuned teacher, and a small
student is distilled — then compared against a baseline student with the
same architecture and step budget that only ever saw the real data.

Takes a few minutes on a laptop CPU (the acceptance-scale run lives in
tests/test_acceptance.py).

    python3 demos/05_full_pipeline.py
"""

import time
from dataclasses import replace

import numpy as np

from lesionforge.data import make_toy_dataset
from lesionforge.models import ViTConfig
from lesionforge.pipeline import (
    PipelineConfig,
    prepare_pipeline,
    run_student_arms,
)
from lesionforge.rng import RngState

COUNTS = [45, 22, 10, 2, 5, 6]  # 6 classes, heavy head, starved boundary


def main() -> None:
    start = time.time()
    train = make_toy_dataset(COUNTS, image_size=32, seed=17)
    eval_data = make_toy_dataset([10] * len(COUNTS), image_size=32, seed=1017)
    freq = train.frequency_table()
    print(f"real data: {len(train)} records, per-class {freq.tolist()}")
    print(f"benign classes: {sum(train.benign_flags)} of {len(COUNTS)}")

    defaults = PipelineConfig()
    cfg = PipelineConfig(
        diffusion_steps=2000,
        student=ViTConfig(image_size=32, patch_size=8, dim=24, depth=2,
                          heads=4, num_classes=0),
        student_epochs=16,
        mae_train=replace(defaults.mae_train, epochs=10),
        teacher_protocol=replace(defaults.teacher_protocol, epochs=30),
    )
    artifacts = prepare_pipeline(train, RngState(17), cfg)
    print(f"synthesized {len(artifacts.synthetic)} images; "
          f"merged corpus has {len(artifacts.merged)}")
    print(f"denoiser final mse {artifacts.denoiser_history[-1]['mse']:.4f}; "
          f"teacher final loss {artifacts.teacher_history[-1]['loss']:.4f}")

    distilled, baseline = run_student_arms(
        artifacts, train, eval_data, seed=5, cfg=cfg
    )
    print(f"\nstep-matched budgets: distilled {distilled.header['epochs']} "
          f"epochs on {distilled.header['train_records']} records, baseline "
          f"{baseline.header['epochs']} epochs on "
          f"{baseline.header['train_records']}")
    for report in (distilled, baseline):
        macro = report.value("categorical", "macro_f1")
        mal = report.value("binary", "malignant_f1")
        print(f"{report.variant:9s} macro-F1 {macro:.4f}   "
              f"malignant-F1 {mal:.4f}")
    margin = (distilled.value("categorical", "macro_f1")
              - baseline.value("categorical", "macro_f1"))
    print(f"\nmacro-F1 margin at this miniature budget: {margin:+.4f}")
    print("(the full-budget, multi-seed comparison — including the "
          "malignant-binary margin — runs in tests/test_acceptance.py)")
    print(f"total {time.time() - start:.0f}s")


if __name__ == "__main__":
    main()
