from __future__ import annotations

from pathlib import Path

import polars as pl
from matplotlib import pyplot as plt

REWARD_COLUMNS: tuple[str, ...] = ("mean_r_llm", "mean_r_loc", "mean_r_att", "mean_r_combined")


class RunVisualiser:
    """
    The visualisations will include:
        - Per-iteration reward curves of the rewarding stage
        - Per-epoch loss and dev accuracy of instruction tuning
        - Injected-IoU accuracy curves
    """

    def __init__(self, run_dir: str | Path) -> None:
        self.run_dir: Path = Path(run_dir)

    def _save(self, fig: plt.Figure, name: str) -> Path:
        path = self.run_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path

    def plot_rewards(self, metrics: pl.DataFrame, name: str = "aar/rewards.png") -> Path:
        fig, ax = plt.subplots(figsize=(8, 5))
        for column in REWARD_COLUMNS:
            if column in metrics.columns:
                ax.plot(metrics["iteration"], metrics[column], label=column.removeprefix("mean_"))
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean reward")
        ax.legend()
        return self._save(fig, name)

    def plot_sft(self, metrics: pl.DataFrame, name: str = "sft/training.png") -> Path:
        fig, ax = plt.subplots(figsize=(8, 5))
        ax.plot(metrics["epoch"], metrics["loss"], marker="o", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        accuracy_ax = ax.twinx()
        accuracy_ax.plot(metrics["epoch"], metrics["token_accuracy"], marker="s", color="tab:green", label="token accuracy")
        if "dev_acc" in metrics.columns and metrics["dev_acc"].null_count() < metrics.height:
            accuracy_ax.plot(metrics["epoch"], metrics["dev_acc"], marker="^", color="tab:red", label="dev ACC")
        accuracy_ax.set_ylim(0.0, 1.05)
        accuracy_ax.legend(loc="lower right")
        return self._save(fig, name)

    def plot_injection(self, curve: pl.DataFrame, name: str = "eval/injection.png") -> Path:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(curve["target_iou"], curve["acc"], marker="o", label="ACC")
        ax.set_xlabel("injected bbox IoU")
        ax.set_ylabel("ACC")
        ax.set_ylim(0.0, 1.05)
        return self._save(fig, name)
