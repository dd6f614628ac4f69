"""Overfit a tiny denoiser on a handful of images, then sample from it.

Takes about a minute on a laptop CPU. Writes a sample grid to
``demo_out/diffusion_samples.png``.

    python3 demos/02_diffusion_toy.py
"""

from pathlib import Path

from lesionforge.data import make_toy_dataset
from lesionforge.diffusion import (
    DiffusionLossConfig,
    make_schedule,
    sample,
    train_diffusion,
)
from lesionforge.images import save_image_grid
from lesionforge.models import DenoiserConfig, build_denoiser
from lesionforge.optim import Optimizer, OptimizerConfig, ScheduleConfig
from lesionforge.rng import RngState


def main() -> None:
    data = make_toy_dataset([4, 4], image_size=16, seed=21)
    print(f"training set: {len(data)} images, classes {data.class_names}")

    cfg = DenoiserConfig(
        image_size=16, num_classes=0, base_channels=8,
        channel_mults=(1, 2), groups=4,
    )
    model = build_denoiser(cfg, RngState(2).child("init"))
    schedule = make_schedule(50, 1e-3, 0.1)
    optimizer = Optimizer(model.store, OptimizerConfig(kind="adamw", lr=2e-3))

    steps = 800
    history = train_diffusion(
        model, model.store, data, schedule,
        DiffusionLossConfig(lambda_perceptual=0.0),
        optimizer,
        ScheduleConfig(base_lr=2e-3, total_steps=steps, kind="cosine"),
        steps, 8, RngState(2).child("train"), conditional=False,
    )
    for record in history[:: len(history) // 8]:
        print(f"  step {record['step']:4d}  mse {record['mse']:.4f}")
    print(f"final mse: {history[-1]['mse']:.4f}")

    grid = sample(model, schedule, 16, rng=RngState(2).child("sample"))
    out = Path("demo_out")
    out.mkdir(exist_ok=True)
    path = save_image_grid(out / "diffusion_samples.png", (grid + 1) / 2, cols=4)
    print(f"wrote 16 samples to {path}")


if __name__ == "__main__":
    main()
