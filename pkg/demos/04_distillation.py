"""Knowledge distillation: the loss algebra, then a tiny teacher-student run.

    python3 demos/04_distillation.py
"""

import numpy as np

from lesionforge.data import make_toy_dataset, to_classifier_input
from lesionforge.distill import (
    KDConfig,
    TrainProtocol,
    cross_entropy,
    kd_loss,
    predict,
    train_classifier,
)
from lesionforge.metrics import evaluate
from lesionforge.models import ViTConfig, build_vit
from lesionforge.rng import RngState
from lesionforge.tensor import Tensor


def main() -> None:
    rng = RngState(4)

    # -- the blended objective degenerates exactly as expected -------------
    student_logits = Tensor(rng.child("s").normal((6, 3)), requires_grad=True)
    teacher_logits = rng.child("t").normal((6, 3))
    labels = rng.child("y").integers(0, 3, (6,))

    ce = cross_entropy(student_logits, labels)
    loss0, parts0 = kd_loss(student_logits, teacher_logits, labels,
                            KDConfig(alpha=0.0))
    print(f"alpha=0: kd loss {float(loss0.data):.12f} "
          f"== cross-entropy {float(ce.data):.12f}")

    _, parts_match = kd_loss(
        Tensor(teacher_logits.copy()), teacher_logits, labels,
        KDConfig(alpha=0.5),
    )
    print(f"matching logits: kl term is exactly {parts_match['kl']}")

    for alpha in (0.25, 0.5, 0.75):
        loss_a, parts = kd_loss(student_logits, teacher_logits, labels,
                                KDConfig(alpha=alpha))
        blended = (1 - alpha) * parts["ce"] + alpha * parts["kl"]
        print(f"alpha={alpha}: loss {float(loss_a.data):.6f} "
              f"= (1-a)*ce + a*kl = {blended:.6f}")

    # -- tiny teacher-student experiment ------------------------------------
    train = make_toy_dataset([24, 16, 8], image_size=16, seed=41)
    eval_data = make_toy_dataset([8, 8, 8], image_size=16, seed=42)

    teacher_cfg = ViTConfig(
        image_size=16, patch_size=4, dim=32, depth=2, heads=4, num_classes=3
    )
    student_cfg = ViTConfig(
        image_size=16, patch_size=8, dim=16, depth=1, heads=2, num_classes=3
    )
    protocol = TrainProtocol(epochs=120, lr=2e-3, batch_size=16)

    teacher = build_vit(teacher_cfg, RngState(43))
    train_classifier(teacher, train, protocol, RngState(44))

    scratch = build_vit(student_cfg, RngState(45))
    train_classifier(scratch, train, protocol, RngState(46))

    distilled = build_vit(student_cfg, RngState(45))  # same init as scratch
    train_classifier(
        distilled, train, protocol, RngState(46),
        teacher=teacher, kd=KDConfig(alpha=0.5, temperature=2.0),
    )

    pixels = to_classifier_input(eval_data.images)
    for name, model in (("teacher", teacher), ("scratch student", scratch),
                        ("distilled student", distilled)):
        m = evaluate(predict(model, pixels), eval_data.labels, 3)
        print(f"{name:18s} accuracy {m['accuracy']:.3f} "
              f"macro-F1 {m['macro_f1']:.3f}")


if __name__ == "__main__":
    main()
