# Trainer — SGD with momentum, the training loop, evaluation and gradcheck
#
# Each window runs on its own GradientTape; with workers > 1 windows of a
# batch are evaluated on a thread pool. Gradients are always summed in
# sample-index order, so results do not depend on the worker count.

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np

from config import GRADCHECK_FLOOR, GRADCHECK_STEP
from models.schemas import (
    EpochRecord, GradcheckEntry, GradcheckReport, MetricsRecord, MetricSummary,
    RepeatSummary, TrainConfig,
)
from services.checkpoint import Checkpoint
from services.data_pipeline import (
    EpidemicDataset, Normalizer, WindowSample, latest_window, make_windows,
    peak_thresholds, peak_time_error, rmse,
)
from services.earth_model import ModelParams, forward, model_graph
from services.errors import ConfigError, ContractError, NumericError, TrainingAborted
from services.fusion_head import loss as loss_fn
from services.gltg import TransmissionGraph, build_graph
from services.tensor_core import GradientTape

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")
Arrays = Mapping[str, np.ndarray]


# ── Optimizer ────────────────────────────────────────────────────────────────

def clip_scale(grads: Arrays, max_norm: Optional[float]) -> float:
    """Factor that brings the global gradient norm down to `max_norm` (1.0 when already below)."""
    if max_norm is None:
        return 1.0
    norm = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    return 1.0 if norm <= max_norm else max_norm / norm


def sgd_step(
    params:   Arrays,
    grads:    Arrays,
    cfg:      TrainConfig,
    velocity: Optional[Arrays] = None
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """
    v' = momentum·v + (g + weight_decay·p)
    p' = p − lr·v'
    g is the gradient rescaled so its global norm is at most cfg.grad_clip.
    """
    checked = {}
    for name in params:
        if name not in grads:
            raise ContractError(f"no gradient for parameter '{name}'")
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient for parameter '{name}'", parameter=name)
        checked[name] = g
    scale = clip_scale(checked, cfg.grad_clip)
    if scale < 1.0:
        logger.debug("gradient clipped scale=%.4g", scale)

    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = checked[name] * scale if scale < 1.0 else checked[name]
        v = velocity[name] if velocity is not None else np.zeros_like(p)
        v_next = cfg.momentum * v + (g + cfg.weight_decay * p)
        new_params[name]   = p - cfg.lr * v_next
        new_velocity[name] = v_next
    return new_params, new_velocity


# ── Per-window evaluation ────────────────────────────────────────────────────

def _map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sample_gradients(
    params: ModelParams,
    sample: WindowSample,
    graph:  TransmissionGraph,
    cfg:    TrainConfig
) -> Tuple[float, Dict[str, np.ndarray]]:
    """(loss, gradients by parameter name) for one window."""
    with GradientTape() as tape:
        bound  = params.bind(tape)
        result = forward(bound, sample, graph, cfg)
        value  = loss_fn(result.y, sample.target[:, None], cfg.loss)
        total  = value if result.penalty is None else value + result.penalty
    return value.item(), tape.gradient(total, bound.leaves)


def batch_gradients(
    params: ModelParams,
    batch:  Sequence[WindowSample],
    graph:  TransmissionGraph,
    cfg:    TrainConfig
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean loss and mean gradient over the batch."""
    results = _map(lambda s: sample_gradients(params, s, graph, cfg), batch, cfg.workers)
    total = {name: np.zeros_like(arr) for name, arr in params.items()}
    for _, grads in results:
        for name in total:
            total[name] = total[name] + grads[name]
    scale = 1.0 / len(batch)
    return sum(v for v, _ in results) * scale, {k: v * scale for k, v in total.items()}


def predict_windows(
    params:     ModelParams,
    windows:    Sequence[WindowSample],
    graph:      TransmissionGraph,
    cfg:        TrainConfig,
    normalizer: Normalizer
) -> np.ndarray:
    """W×N forecasts in raw units."""
    bound = params.bind()

    def one(sample: WindowSample) -> np.ndarray:
        return normalizer.inverse(forward(bound, sample, graph, cfg).y.data[:, 0])

    return np.stack(_map(one, windows, cfg.workers))


def dataset_loss(params: ModelParams, windows: Sequence[WindowSample], graph: TransmissionGraph, cfg: TrainConfig) -> float:
    """Mean training objective over `windows`, without gradients."""
    bound = params.bind()
    values = _map(
        lambda s: loss_fn(forward(bound, s, graph, cfg).y, s.target[:, None], cfg.loss).item(),
        windows, cfg.workers,
    )
    return float(np.mean(values))


# ── Training ─────────────────────────────────────────────────────────────────

@dataclass
class TrainRun:
    checkpoint:   Checkpoint
    final_params: ModelParams
    history:      List[EpochRecord] = field(default_factory=list)


def _validation_rmse(params, windows, graph, cfg, normalizer) -> float:
    preds = predict_windows(params, windows, graph, cfg, normalizer)
    return rmse(preds, np.stack([w.target_raw for w in windows]))


def _train_epoch(
    params:    ModelParams,
    velocity:  Optional[Arrays],
    train_set: Sequence[WindowSample],
    order:     np.ndarray,
    graph:     TransmissionGraph,
    cfg:       TrainConfig
) -> Tuple[ModelParams, Optional[Arrays], float]:
    """One pass over `train_set` in `order`; returns params, velocity and the mean batch loss."""
    running = 0.0
    for lo in range(0, len(order), cfg.batch_size):
        batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
        batch_loss, grads = batch_gradients(params, batch, graph, cfg)
        if not np.isfinite(batch_loss):
            raise NumericError(f"loss is {batch_loss}")
        arrays, velocity = sgd_step(params.arrays, grads, cfg, velocity)
        params = params.replace_arrays(arrays)
        running += batch_loss * len(batch)
    return params, velocity, running / len(train_set)


def fit(
    ds:        EpidemicDataset,
    cfg:       TrainConfig,
    cache_dir: Optional[str] = None,
    on_epoch:  Optional[Callable[[EpochRecord], None]] = None
) -> TrainRun:
    """
    Train with seeded shuffling and early stopping on validation RMSE.
    The returned checkpoint holds the best-validation parameters.

    An epoch that diverges is discarded: parameters roll back to the best
    checkpoint, momentum is reset and the learning rate halves. After
    cfg.max_rollbacks rollbacks the next divergence raises TrainingAborted
    carrying the best checkpoint.
    """
    normalizer = Normalizer.fit(ds.split_series("train"))
    graph      = model_graph(ds, cfg, cache_dir)
    train_set  = make_windows(ds, cfg.window, cfg.horizon, cfg.missing_rate, cfg.seed, "train", normalizer)
    val_set    = make_windows(ds, cfg.window, cfg.horizon, cfg.missing_rate, cfg.seed, "val", normalizer)

    params   = ModelParams.init(cfg)
    velocity = None
    rng      = np.random.default_rng(cfg.seed)

    def snapshot(p: ModelParams, epoch: int, val: float) -> Checkpoint:
        return Checkpoint(
            params=p.copy(), config=cfg, dataset=ds.name, epoch=epoch, best_val_rmse=val,
            region_names=list(ds.region_names), normalizer=normalizer, graph=graph,
        )

    try:
        initial_val = _validation_rmse(params, val_set, graph, cfg, normalizer)
    except NumericError as exc:
        raise TrainingAborted(f"initial forward pass failed: {exc}") from exc
    if not np.isfinite(initial_val):
        raise TrainingAborted(f"initial validation rmse is {initial_val}")
    best = snapshot(params, 0, initial_val)
    history: List[EpochRecord] = []
    stale = rollbacks = 0
    step_cfg = cfg

    logger.info(
        "training dataset=%s variant=%s horizon=%d windows=%d/%d params=%d",
        ds.name, cfg.variant, cfg.horizon, len(train_set), len(val_set), len(params),
    )
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        try:
            params, velocity, train_loss = _train_epoch(params, velocity, train_set, order, graph, step_cfg)
            val = _validation_rmse(params, val_set, graph, cfg, normalizer)
            if not np.isfinite(val):
                raise NumericError(f"validation rmse is {val}")
        except (NumericError, TrainingAborted) as exc:
            parameter = getattr(exc, "parameter", None)
            if rollbacks >= cfg.max_rollbacks:
                logger.warning("training aborted epoch=%d parameter=%s: %s", epoch, parameter, exc)
                raise TrainingAborted(f"epoch {epoch}: {exc}", checkpoint=best, parameter=parameter) from exc
            rollbacks += 1
            step_cfg = step_cfg.model_copy(update={"lr": step_cfg.lr * 0.5})
            params, velocity = best.params.copy(), None
            logger.warning(
                "divergence rollback epoch=%d best_epoch=%d lr=%.3g rollbacks=%d: %s",
                epoch, best.epoch, step_cfg.lr, rollbacks, exc,
            )
            continue

        record = EpochRecord(epoch=epoch, train_loss=train_loss, val_rmse=val)
        history.append(record)
        logger.info("epoch=%d train_loss=%.6g val_rmse=%.6g", epoch, record.train_loss, val)
        if on_epoch is not None:
            on_epoch(record)

        if val < best.best_val_rmse:
            best, stale = snapshot(params, epoch, val), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.warning("early stop epoch=%d best_epoch=%d best_val_rmse=%.6g", epoch, best.epoch, best.best_val_rmse)
                break
    return TrainRun(checkpoint=best, final_params=params, history=history)


def train(ds: EpidemicDataset, cfg: TrainConfig, cache_dir: Optional[str] = None) -> Checkpoint:
    return fit(ds, cfg, cache_dir).checkpoint


# ── Evaluation ───────────────────────────────────────────────────────────────

def _check_regions(ckpt: Checkpoint, ds: EpidemicDataset) -> None:
    if list(ckpt.region_names) != list(ds.region_names):
        raise ContractError(
            f"checkpoint regions {ckpt.region_names} do not match dataset regions {ds.region_names}"
        )


def evaluate(
    ckpt:         Checkpoint,
    ds:           EpidemicDataset,
    horizon:      Optional[int] = None,
    split:        str = "test",
    missing_rate: Optional[float] = None,
    seed:         Optional[int] = None
) -> MetricsRecord:
    """RMSE and peak time error in raw units, next to the persistence baseline."""
    started = time.perf_counter()
    _check_regions(ckpt, ds)
    cfg = ckpt.config
    if horizon is not None and horizon != cfg.horizon:
        raise ConfigError(f"checkpoint was trained for horizon {cfg.horizon}, not {horizon}")
    rate = cfg.missing_rate if missing_rate is None else missing_rate
    seed = cfg.seed if seed is None else seed

    windows = make_windows(ds, cfg.window, cfg.horizon, rate, seed, split, ckpt.normalizer)
    preds   = predict_windows(ckpt.params, windows, ckpt.graph, cfg, ckpt.normalizer)
    truth   = np.stack([w.target_raw for w in windows])
    naive   = np.stack([w.last_raw for w in windows])
    thresholds = peak_thresholds(ds, cfg.peak_threshold)

    record = MetricsRecord(
        dataset=ds.name,
        horizon=cfg.horizon,
        seed=seed,
        variant=cfg.variant,
        missing_rate=rate,
        rmse=rmse(preds, truth),
        peak_time_error=peak_time_error(preds, truth, thresholds),
        persistence_rmse=rmse(naive, truth),
        persistence_peak_time_error=peak_time_error(naive, truth, thresholds),
        n_windows=len(windows),
        wall_time=time.perf_counter() - started,
    )
    logger.info(
        "evaluated dataset=%s split=%s horizon=%d rmse=%.6g persistence_rmse=%.6g",
        ds.name, split, cfg.horizon, record.rmse, record.persistence_rmse,
    )
    return record


def summarize(values: Sequence[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return MetricSummary(mean=float(arr.mean()), std=std, n=int(arr.size))


def evaluate_repeats(
    ds:        EpidemicDataset,
    cfg:       TrainConfig,
    seeds:     Optional[Iterable[int]] = None,
    cache_dir: Optional[str] = None
) -> RepeatSummary:
    """
    One model per seed; mean and sample std of every metric.
    A run that aborts after training started is scored with its best checkpoint.
    """
    seeds = list(seeds) if seeds is not None else list(range(cfg.repeats))
    records = []
    for seed in seeds:
        run_cfg = cfg.model_copy(update={"seed": seed})
        try:
            ckpt = train(ds, run_cfg, cache_dir)
        except TrainingAborted as exc:
            if exc.checkpoint is None:
                raise
            logger.warning("seed=%d aborted, scoring best checkpoint epoch=%d: %s", seed, exc.checkpoint.epoch, exc)
            ckpt = exc.checkpoint
        records.append(evaluate(ckpt, ds))
    peaks = [r.peak_time_error for r in records if r.peak_time_error is not None]
    return RepeatSummary(
        dataset=ds.name,
        horizon=cfg.horizon,
        variant=cfg.variant,
        missing_rate=cfg.missing_rate,
        seeds=seeds,
        rmse=summarize([r.rmse for r in records]),
        peak_time_error=summarize(peaks) if peaks else None,
        persistence_rmse=summarize([r.persistence_rmse for r in records]),
        records=records,
    )


def run_ablation(
    ds:        EpidemicDataset,
    cfg:       TrainConfig,
    variants:  Iterable[str],
    seeds:     Optional[Iterable[int]] = None,
    cache_dir: Optional[str] = None
) -> List[RepeatSummary]:
    seeds = list(seeds) if seeds is not None else list(range(cfg.repeats))
    summaries = []
    for variant in variants:
        variant_cfg = TrainConfig.model_validate({**cfg.model_dump(), "variant": variant})
        summary = evaluate_repeats(ds, variant_cfg, seeds, cache_dir)
        logger.info("ablation variant=%s rmse_mean=%.6g rmse_std=%.6g", variant, summary.rmse.mean, summary.rmse.std)
        summaries.append(summary)
    return summaries


def forecast(ckpt: Checkpoint, ds: EpidemicDataset) -> np.ndarray:
    """Raw-unit forecast of x_{L−1+h} per region from the last window of the series."""
    _check_regions(ckpt, ds)
    sample = latest_window(ds, ckpt.config.window, ckpt.normalizer)
    y = forward(ckpt.params.bind(), sample, ckpt.graph, ckpt.config).y.data[:, 0]
    return ckpt.normalizer.inverse(y)


def learned_graph(ckpt: Checkpoint, ds: EpidemicDataset) -> np.ndarray:
    """N×N transmission matrix E(T) at the end of the last window; row v holds the weights v draws infection from."""
    _check_regions(ckpt, ds)
    sample = latest_window(ds, ckpt.config.window, ckpt.normalizer)
    return forward(ckpt.params.bind(), sample, ckpt.graph, ckpt.config).transmission


# ── Gradient check ───────────────────────────────────────────────────────────

GRADCHECK_CONFIG = {
    "hidden": 4, "mlp_hidden": 4, "n_heads": 2, "window": 5, "horizon": 1,
    "top_k": 1, "solver": "rk4", "substeps": 1,
}
GRADCHECK_REGIONS = 3


def gradcheck_problem(cfg: TrainConfig, seed: int = 0) -> Tuple[WindowSample, TransmissionGraph]:
    """A random three-region window on a path graph."""
    rng = np.random.default_rng(seed)
    n, window = GRADCHECK_REGIONS, cfg.window
    X = rng.normal(size=(n, window))
    target = rng.normal(size=n)
    A = np.zeros((n, n))
    for v in range(n - 1):
        A[v, v + 1] = A[v + 1, v] = 1.0
    sample = WindowSample(
        X=X, target=target, knot_times=[np.arange(window, dtype=np.float64)] * n,
        start=0, target_index=window - 1 + cfg.horizon, last_raw=X[:, -1], target_raw=target,
    )
    graph = build_graph(A, X, min(cfg.top_k, n - 1), cfg.dtw_znormalize)
    return sample, graph


def _objective(params: ModelParams, sample: WindowSample, graph: TransmissionGraph, cfg: TrainConfig) -> float:
    result = forward(params.bind(), sample, graph, cfg)
    value = loss_fn(result.y, sample.target[:, None], cfg.loss)
    if result.penalty is not None:
        value = value + result.penalty
    return value.item()


def _numeric_gradient(params: ModelParams, name: str, sample: WindowSample, graph: TransmissionGraph, cfg: TrainConfig) -> np.ndarray:
    """Five-point central differences, truncation error O(step⁴)."""
    base = params[name]
    out  = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        values = {}
        for k in (-2, -1, 1, 2):
            arr = base.copy()
            arr[idx] += k * GRADCHECK_STEP
            values[k] = _objective(params.replace_arrays({**params.arrays, name: arr}), sample, graph, cfg)
        out[idx] = (values[-2] - 8.0 * values[-1] + 8.0 * values[1] - values[2]) / (12.0 * GRADCHECK_STEP)
    return out


def gradcheck(
    cfg:        Optional[TrainConfig] = None,
    zero_drive: bool = False,
    seed:       int = 0,
    tolerance:  float = 1e-4
) -> GradcheckReport:
    """
    Tape gradients against finite differences for every parameter.

    The relative error |a − n| / max(|a|, |n|) is reported unfloored. Entries
    where both gradients are below GRADCHECK_FLOOR sit at the level of the
    differencing round-off; they are skipped and counted, never scored as 0.
    `zero_drive` zeroes ψ_t, which freezes the dynamics.
    """
    started = time.perf_counter()
    cfg = cfg or TrainConfig(**GRADCHECK_CONFIG, seed=seed)
    sample, graph = gradcheck_problem(cfg, seed)
    params = ModelParams.init(cfg, seed)
    if zero_drive:
        params = params.replace_arrays({
            k: (np.zeros_like(v) if k.startswith("eano.psi_") else v) for k, v in params.items()
        })

    with GradientTape() as tape:
        bound  = params.bind(tape)
        result = forward(bound, sample, graph, cfg)
        total  = loss_fn(result.y, sample.target[:, None], cfg.loss)
        if result.penalty is not None:
            total = total + result.penalty
    analytic = tape.gradient(total, bound.leaves)

    entries = []
    for name, base in params.items():
        numeric = _numeric_gradient(params, name, sample, graph, cfg)
        scale   = np.maximum(np.abs(analytic[name]), np.abs(numeric))
        scored  = scale >= GRADCHECK_FLOOR
        rel     = np.abs(analytic[name] - numeric)[scored] / scale[scored]
        entries.append(GradcheckEntry(
            name=name,
            shape=list(base.shape),
            max_relative_error=float(rel.max()) if rel.size else 0.0,
            checked=int(scored.sum()),
            skipped=int(scored.size - scored.sum()),
            analytic_norm=float(np.linalg.norm(analytic[name])),
            numeric_norm=float(np.linalg.norm(numeric)),
        ))
        logger.debug("gradcheck %s max_relative_error=%.3g skipped=%d", name, entries[-1].max_relative_error, entries[-1].skipped)

    worst   = max(e.max_relative_error for e in entries)
    checked = sum(e.checked for e in entries)
    report = GradcheckReport(
        entries=entries,
        max_relative_error=worst,
        tolerance=tolerance,
        floor=GRADCHECK_FLOOR,
        checked=checked,
        skipped=sum(e.skipped for e in entries),
        passed=checked > 0 and worst < tolerance,
        wall_time=time.perf_counter() - started,
    )
    logger.info(
        "gradcheck params=%d checked=%d skipped=%d max_relative_error=%.3g passed=%s",
        len(entries), report.checked, report.skipped, worst, report.passed,
    )
    return report
