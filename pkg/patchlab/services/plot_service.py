"""
SVG line plots of per-feature outputs over training.
"""

import logging
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from patchlab.core.train import TraceLog
from patchlab.models.configs import DataConfig
from patchlab.models.enums import FeatureTier, TrainingMethod

logger = logging.getLogger(__name__)

METHOD_STYLE = {
    TrainingMethod.ERM: ("ERM", "tab:blue"),
    TrainingMethod.CUTOUT: ("Cutout", "tab:orange"),
    TrainingMethod.CUTMIX: ("CutMix", "tab:green"),
}
PANEL_TITLES = {
    FeatureTier.COMMON: "Common feature",
    FeatureTier.RARE: "Rare feature",
    FeatureTier.EXTREME: "Extremely rare feature",
}


class PlotService:
    """Renders the three-panel feature-output figure."""

    def __init__(self) -> None:
        matplotlib.rcParams["svg.hashsalt"] = "patchlab"
        matplotlib.rcParams["svg.fonttype"] = "none"

    def feature_panels(
        self, traces: dict[TrainingMethod, TraceLog], config: DataConfig, path: Path
    ) -> Path | None:
        """
        Plot phi(<w_1, v>) - phi(<w_-1, v>) for the first positive feature of each tier.

        Args:
            traces: Trace per trained method.
            config: Data config, for the tier of each feature index.
            path: Output SVG path.

        Returns:
            The path written, or None when no tier has a feature.
        """
        tiers = [t for t in FeatureTier if config.tier_indices(t)]
        if not tiers or not traces:
            return None

        fig = Figure(figsize=(4.0 * len(tiers), 3.2))
        axes = fig.subplots(1, len(tiers), squeeze=False)[0]
        for ax, tier in zip(axes, tiers, strict=True):
            k = config.tier_indices(tier)[0]
            column = f"out_v_p1_{k + 1}"
            for method, trace in traces.items():
                label, color = METHOD_STYLE[method]
                ax.plot(trace.steps, trace.column(column), label=label, color=color)
            ax.set_title(PANEL_TITLES[tier])
            ax.set_xlabel("iteration")
            ax.grid(True, linestyle="--", alpha=0.4)
        axes[0].set_ylabel("feature output")
        axes[0].legend(loc="best")
        fig.tight_layout()

        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
        logger.info(f"Wrote figure {path}", extra={"tiers": [t.value for t in tiers]})
        return path


_plot_service: PlotService | None = None


def get_plot_service() -> PlotService:
    """Get the plot service singleton."""
    global _plot_service
    if _plot_service is None:
        _plot_service = PlotService()
    return _plot_service
