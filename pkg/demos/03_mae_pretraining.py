"""Masked-autoencoder pretraining on toy data, with a reconstruction grid.

Writes original / masked / reconstructed rows for four held-out images
to ``demo_out/mae_reconstruction.png``. Runs in about a minute.

    python3 demos/03_mae_pretraining.py
"""

from pathlib import Path

import numpy as np

from lesionforge.data import make_toy_dataset, to_classifier_input
from lesionforge.images import save_image_grid
from lesionforge.mae import (
    MAEConfig,
    MAETrainConfig,
    build_mae,
    mae_forward,
    mae_loss,
    pretrain_mae,
    sample_mask,
)
from lesionforge.models import ViTConfig
from lesionforge.nn import patchify, unpatchify
from lesionforge.rng import RngState
from lesionforge.tensor import Tensor, no_grad


def main() -> None:
    data = make_toy_dataset([24, 12], image_size=16, seed=31)
    cfg = MAEConfig(
        encoder=ViTConfig(
            image_size=16, patch_size=4, dim=32, depth=2, heads=4,
            num_classes=0,
        ),
        decoder_heads=4,
    )
    model = build_mae(cfg, RngState(3).child("init"))
    history = pretrain_mae(
        model, data, MAETrainConfig(epochs=10, batch_size=12, lr=1e-3),
        RngState(3).child("train"),
    )
    for record in history:
        print(
            f"  epoch {record['epoch']:2d}  "
            f"train {record['loss']:.4f}  holdout {record['holdout_loss']:.4f}"
        )

    # visualize: original row, masked row, reconstructed row
    n_patches = cfg.encoder.num_patches
    originals = to_classifier_input(data.images[:4])
    rows = []
    with no_grad():
        for i in range(4):
            img = originals[i]
            mask = sample_mask(n_patches, 0.75, RngState(3).child(f"viz{i}"))
            recon = mae_forward(model, img, mask)
            loss = mae_loss(recon, img, mask)

            tokens = patchify(Tensor(img[None]), cfg.encoder.patch_size).data
            masked_tokens = tokens.copy()
            masked_tokens[0, mask.masked_indices] = 0.0
            blended = tokens.copy()
            blended[0, mask.masked_indices] = recon.data[mask.masked_indices]
            rows.append((
                img,
                unpatchify(Tensor(masked_tokens), cfg.encoder.patch_size).data[0],
                unpatchify(Tensor(blended), cfg.encoder.patch_size).data[0],
                float(loss.data),
            ))

    print("per-image masked mse:", [round(r[3], 4) for r in rows])
    grid = np.stack(
        [r[0] for r in rows] + [r[1] for r in rows] + [r[2] for r in rows]
    )
    # inputs are standardized to [-1, 1]; map back for display
    grid = np.clip((grid + 1) / 2, 0.0, 1.0)
    out = Path("demo_out")
    out.mkdir(exist_ok=True)
    path = save_image_grid(out / "mae_reconstruction.png", grid, cols=4)
    print(f"wrote original/masked/reconstructed rows to {path}")


if __name__ == "__main__":
    main()
