"""Figure rendering for training logs and sweep results (headless)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(runlog, path: str) -> None:
    """Loss components per step plus the per-epoch validation metric."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 7), sharex=False)
    steps = [r["step"] for r in runlog.steps]
    for key, label in (
        ("mmi_trans", "translation"),
        ("disc", "discriminator"),
        ("cycle", "cycle"),
        ("total", "total"),
    ):
        series = [r[key] for r in runlog.steps]
        if any(v != 0.0 for v in series):
            ax1.plot(steps, series, label=label, linewidth=1.0)
    ax1.set_xlabel("optimizer step")
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.set_title("training loss components")

    epochs = [r["epoch"] for r in runlog.epochs]
    metrics = [r["valid_metric"] for r in runlog.epochs]
    ax2.plot(epochs, metrics, marker="o")
    if runlog.selected_epoch is not None:
        ax2.axvline(runlog.selected_epoch, color="gray", linestyle="--", linewidth=1)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation metric")
    ax2.set_title("model selection")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_curve(
    rows: list[tuple[float, float]], plain_bleu: float | None, path: str
) -> None:
    """Test BLEU against the forward-translation weight."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [lam for lam, _ in rows]
    ys = [bleu for _, bleu in rows]
    ax.plot(xs, ys, marker="o", label="mixed objective")
    if plain_bleu is not None:
        ax.axhline(
            plain_bleu, color="gray", linestyle="--", linewidth=1,
            label="plain translation loss",
        )
    ax.set_xlabel("forward-translation weight")
    ax.set_ylabel("test BLEU")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
