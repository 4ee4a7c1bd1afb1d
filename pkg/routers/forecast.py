from functools import lru_cache
from pathlib import Path

import numpy as np
from fastapi import APIRouter, HTTPException

import config
from models.schemas import ForecastRequest, ForecastResponse, GraphResponse, ModelInfo
from services.checkpoint import Checkpoint, load_checkpoint
from services.data_pipeline import EpidemicDataset, Split, load_csv
from services.errors import EarthError
from services.trainer import forecast, learned_graph

router = APIRouter(prefix="/forecast", tags=["forecast"])


@lru_cache(maxsize=4)
def _cached_checkpoint(path: str, mtime_ns: int) -> Checkpoint:
    return load_checkpoint(path)


def current_checkpoint() -> Checkpoint:
    """The checkpoint named by EARTH_CHECKPOINT, reloaded when the file changes."""
    path = config.CHECKPOINT_PATH
    if not path or not Path(path).exists():
        raise HTTPException(status_code=404, detail=f"No checkpoint at '{path}' (set EARTH_CHECKPOINT)")
    try:
        return _cached_checkpoint(path, Path(path).stat().st_mtime_ns)
    except EarthError as exc:
        raise HTTPException(status_code=422, detail=str(exc))


def _request_dataset(req: ForecastRequest, ckpt: Checkpoint) -> EpidemicDataset:
    cfg = ckpt.config
    if req.series is None:
        if not config.SERIES_PATH:
            raise HTTPException(status_code=422, detail="Request has no series and EARTH_SERIES is not set")
        return load_csv(config.SERIES_PATH, train_ratio=cfg.train_ratio, val_ratio=cfg.val_ratio,
                        adjacency=ckpt.graph.A)

    missing = [name for name in ckpt.region_names if name not in req.series]
    if missing:
        raise HTTPException(status_code=422, detail=f"Series missing regions: {missing}")
    lengths = {len(req.series[name]) for name in ckpt.region_names}
    if len(lengths) != 1:
        raise HTTPException(status_code=422, detail="All region series must have the same length")
    series = np.asarray([req.series[name] for name in ckpt.region_names], dtype=np.float64)
    return EpidemicDataset(
        name="request",
        region_names=list(ckpt.region_names),
        series=series,
        adjacency=ckpt.graph.A,
        split=Split.chronological(series.shape[1], cfg.train_ratio, cfg.val_ratio),
    )


@router.get("/model", response_model=ModelInfo)
def model_info():
    """Metadata of the served checkpoint."""
    ckpt = current_checkpoint()
    return ModelInfo(
        dataset=ckpt.dataset,
        regions=ckpt.region_names,
        horizon=ckpt.config.horizon,
        window=ckpt.config.window,
        variant=ckpt.config.variant,
        epoch=ckpt.epoch,
        best_val_rmse=ckpt.best_val_rmse
    )


@router.post("", response_model=ForecastResponse)
def predict_next(req: ForecastRequest):
    """
    Forecast h steps past the end of the given series (or EARTH_SERIES).
    Values are in raw case counts.
    """
    ckpt = current_checkpoint()
    try:
        ds = _request_dataset(req, ckpt)
        values = forecast(ckpt, ds)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except EarthError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return ForecastResponse(
        horizon=ckpt.config.horizon,
        variant=ckpt.config.variant,
        forecasts={name: float(v) for name, v in zip(ds.region_names, values)}
    )


@router.get("/graph", response_model=GraphResponse)
def transmission_graph():
    """Learned transmission matrix E(T) over the last window of EARTH_SERIES."""
    ckpt = current_checkpoint()
    try:
        ds = _request_dataset(ForecastRequest(), ckpt)
        weights = learned_graph(ckpt, ds)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except EarthError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return GraphResponse(
        regions=list(ds.region_names),
        variant=ckpt.config.variant,
        weights=weights.tolist()
    )
