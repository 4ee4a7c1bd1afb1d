import logging
import os

from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL       = os.getenv("EARTH_LOG_LEVEL", "INFO")
CACHE_DIR       = os.getenv("EARTH_CACHE_DIR", ".cache/earth")
CHECKPOINT_PATH = os.getenv("EARTH_CHECKPOINT")
SERIES_PATH     = os.getenv("EARTH_SERIES")

LOG_FORMAT = "%(asctime)s level=%(levelname)s logger=%(name)s %(message)s"


def configure_logging(level: str = None) -> None:
    """Install one stream handler on the root logger (idempotent)."""
    root = logging.getLogger()
    if not any(getattr(h, "_earth", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._earth = True
        root.addHandler(handler)
    root.setLevel((level or LOG_LEVEL).upper())


# ── Published training defaults ─────────────────────────────────
PUBLISHED_DEFAULTS = {
    "lr":           1e-3,
    "momentum":     0.9,
    "weight_decay": 1e-5,
    "hidden":       64,
    "window":       20,
    "horizon":      5,
    "repeats":      5,
}

# ── Unpublished defaults (chosen, see DESIGN.md) ────────────────
ENGINE_DEFAULTS = {
    "epochs":         200,
    "batch_size":     32,
    "patience":       20,
    "n_heads":        4,
    "top_k":          3,
    "solver":         "rk4",
    "substeps":       2,
    "train_ratio":    0.6,
    "val_ratio":      0.2,
    "sparse_penalty": 1e-3,
    "peak_threshold": "percentile:80",
    "grad_clip":      5.0,
    "max_rollbacks":  3,
}

# ── Forecast horizons ───────────────────────────────────────────
HORIZONS     = (5, 10, 15)
MAX_HORIZON  = 20

# ── Numeric floors ──────────────────────────────────────────────
STD_FLOOR        = 1e-8
GRADCHECK_STEP   = 1e-5
GRADCHECK_FLOOR  = 1e-5
SYNTH_SOLVER_DT  = 0.1

# ── Model variants (ablation) ───────────────────────────────────
# sir_drift:    network-SIR drift (True) or a generic per-state field
# graph:        which transmission graph drives the states
# global_trend: integrate H (True) or hold it at H(0)
VARIANTS = {
    "full": {
        "sir_drift": True,  "graph": "dynamic", "global_trend": True,
        "fully_connected": False, "sparse_penalty": False
    },
    "without_both": {
        "sir_drift": False, "graph": "none",    "global_trend": False,
        "fully_connected": False, "sparse_penalty": False
    },
    "eano_only": {
        "sir_drift": True,  "graph": "static",  "global_trend": False,
        "fully_connected": False, "sparse_penalty": False
    },
    "gltg_only": {
        "sir_drift": False, "graph": "dynamic", "global_trend": True,
        "fully_connected": False, "sparse_penalty": False
    },
    "static_graph": {
        "sir_drift": True,  "graph": "static",  "global_trend": True,
        "fully_connected": False, "sparse_penalty": False
    },
    "without_global_trend": {
        "sir_drift": True,  "graph": "dynamic", "global_trend": False,
        "fully_connected": False, "sparse_penalty": False
    },
    "fully_connected": {
        "sir_drift": True,  "graph": "dynamic", "global_trend": True,
        "fully_connected": True,  "sparse_penalty": False
    },
    "sparse_penalty": {
        "sir_drift": True,  "graph": "dynamic", "global_trend": True,
        "fully_connected": False, "sparse_penalty": True
    },
}
