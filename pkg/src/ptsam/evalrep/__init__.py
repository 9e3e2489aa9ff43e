"""Dice metrics, error maps, the few-shot experiment matrix and ablations."""

from .metrics import DiceResult, confusion_counts, dice_score, error_map, evaluate, predict_mask, write_triptych

# experiments depends on traineng, which itself imports metrics; load lazily
_LAZY = (
    "ABLATION_HEADER",
    "ABLATION_VALUES",
    "SUMMARY_HEADER",
    "CellResult",
    "MatrixConfig",
    "ablation_sweep",
    "cell_key",
    "corpus_digest",
    "cell_stats",
    "derived_views",
    "render_table",
    "run_cell",
    "run_matrix",
    "summary_csv",
    "sweep_adapter",
)


def __getattr__(name):
    if name in _LAZY:
        from . import experiments

        return getattr(experiments, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "DiceResult",
    "confusion_counts",
    "dice_score",
    "error_map",
    "evaluate",
    "predict_mask",
    "write_triptych",
    *_LAZY,
]
