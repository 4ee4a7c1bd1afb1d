from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Optional, Literal, Dict

from config import PUBLISHED_DEFAULTS, ENGINE_DEFAULTS, MAX_HORIZON, VARIANTS


class OdeConfig(BaseModel):
    method:                Literal["euler", "rk4"] = "rk4"
    substeps_per_interval: int   = Field(2, ge=1)
    t_start:               float = 0.0
    t_end:                 float = 1.0

    @model_validator(mode="after")
    def _check_span(self):
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")
        return self


class BetaSegment(BaseModel):
    start: float = Field(ge=0.0)
    beta:  float = Field(ge=0.0)


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name:                str = "synthetic"
    n_regions:           int = Field(ge=1)
    length:              int = Field(ge=2)
    coupling:            List[List[float]]
    beta_schedule:       List[BetaSegment]
    gamma:               float = Field(ge=0.0)
    population:          List[float]
    initial_infected:    List[float]
    noise_std:           float = Field(0.0, ge=0.0)
    noise_peak_fraction: float = Field(0.0, ge=0.0)
    seed:                int = 0
    region_names:        Optional[List[str]] = None

    @model_validator(mode="after")
    def _check_shapes(self):
        n = self.n_regions
        if len(self.coupling) != n or any(len(row) != n for row in self.coupling):
            raise ValueError(f"coupling must be {n}x{n}")
        if any(c < 0 for row in self.coupling for c in row):
            raise ValueError("coupling entries must be nonnegative")
        if len(self.population) != n or any(p <= 0 for p in self.population):
            raise ValueError(f"population needs {n} positive entries")
        if len(self.initial_infected) != n:
            raise ValueError(f"initial_infected needs {n} entries")
        if any(i < 0 or i > p for i, p in zip(self.initial_infected, self.population)):
            raise ValueError("initial_infected must lie in [0, population]")
        if not self.beta_schedule or self.beta_schedule[0].start != 0.0:
            raise ValueError("beta_schedule must start at t=0")
        starts = [seg.start for seg in self.beta_schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("beta_schedule starts must be strictly increasing")
        if self.region_names is not None and len(self.region_names) != n:
            raise ValueError(f"region_names needs {n} entries")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr:             float = Field(PUBLISHED_DEFAULTS["lr"], ge=0.0)
    momentum:       float = Field(PUBLISHED_DEFAULTS["momentum"], ge=0.0, lt=1.0)
    weight_decay:   float = Field(PUBLISHED_DEFAULTS["weight_decay"], ge=0.0)
    hidden:         int   = Field(PUBLISHED_DEFAULTS["hidden"], ge=1)
    mlp_hidden:     Optional[int] = Field(None, ge=1)
    window:         int   = Field(PUBLISHED_DEFAULTS["window"], ge=2)
    horizon:        int   = Field(PUBLISHED_DEFAULTS["horizon"], ge=1, le=MAX_HORIZON)
    epochs:         int   = Field(ENGINE_DEFAULTS["epochs"], ge=0)
    batch_size:     int   = Field(ENGINE_DEFAULTS["batch_size"], ge=1)
    patience:       int   = Field(ENGINE_DEFAULTS["patience"], ge=1)
    repeats:        int   = Field(PUBLISHED_DEFAULTS["repeats"], ge=1)
    n_heads:        int   = Field(ENGINE_DEFAULTS["n_heads"], ge=1)
    top_k:          int   = Field(ENGINE_DEFAULTS["top_k"], ge=0)
    solver:         Literal["euler", "rk4"] = ENGINE_DEFAULTS["solver"]
    substeps:       int   = Field(ENGINE_DEFAULTS["substeps"], ge=1)
    seed:           int   = 0
    loss:           Literal["mse", "mae"] = "mse"
    query:          Literal["z", "h"] = "z"
    drift:          Literal["modulation", "pure"] = "modulation"
    edge_weights:   Literal["normalized", "raw"] = "normalized"
    edge_threshold: Optional[float] = Field(None, ge=0.0)
    missing_rate:   float = Field(0.0, ge=0.0, lt=1.0)
    train_ratio:    float = Field(ENGINE_DEFAULTS["train_ratio"], gt=0.0, lt=1.0)
    val_ratio:      float = Field(ENGINE_DEFAULTS["val_ratio"], gt=0.0, lt=1.0)
    variant:        str   = "full"
    sparse_penalty: float = Field(ENGINE_DEFAULTS["sparse_penalty"], ge=0.0)
    dtw_znormalize: bool  = True
    peak_threshold: str   = ENGINE_DEFAULTS["peak_threshold"]
    grad_clip:      Optional[float] = Field(ENGINE_DEFAULTS["grad_clip"], gt=0.0)
    max_rollbacks:  int   = Field(ENGINE_DEFAULTS["max_rollbacks"], ge=0)
    workers:        int   = Field(1, ge=1)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v: str) -> str:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant '{v}', expected one of {sorted(VARIANTS)}")
        return v

    @field_validator("peak_threshold")
    @classmethod
    def _peak_spec(cls, v: str) -> str:
        kind, _, number = v.partition(":")
        if kind not in ("percentile", "absolute"):
            raise ValueError("peak_threshold must be 'percentile:p' or 'absolute:v'")
        value = float(number)
        if kind == "percentile" and not 0.0 <= value <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")
        return v

    @model_validator(mode="after")
    def _check_ratios(self):
        if self.train_ratio + self.val_ratio >= 1.0:
            raise ValueError("train_ratio + val_ratio must leave room for a test split")
        return self

    @property
    def head_hidden(self) -> int:
        return self.mlp_hidden or self.hidden


class MetricsRecord(BaseModel):
    dataset:                     str
    horizon:                     int
    seed:                        int
    variant:                     str = "full"
    missing_rate:                float = 0.0
    rmse:                        float
    peak_time_error:             Optional[float] = None
    persistence_rmse:            float
    persistence_peak_time_error: Optional[float] = None
    n_windows:                   int
    wall_time:                   float


class MetricSummary(BaseModel):
    mean: float
    std:  float
    n:    int


class RepeatSummary(BaseModel):
    dataset:          str
    horizon:          int
    variant:          str
    missing_rate:     float
    seeds:            List[int]
    rmse:             MetricSummary
    peak_time_error:  Optional[MetricSummary] = None
    persistence_rmse: MetricSummary
    records:          List[MetricsRecord] = []


class EpochRecord(BaseModel):
    epoch:      int
    train_loss: float
    val_rmse:   float


class GradcheckEntry(BaseModel):
    name:               str
    shape:              List[int]
    max_relative_error: float
    checked:            int
    skipped:            int
    analytic_norm:      float
    numeric_norm:       float


class GradcheckReport(BaseModel):
    entries:            List[GradcheckEntry]
    max_relative_error: float
    tolerance:          float
    floor:              float
    checked:            int
    skipped:            int
    passed:             bool
    wall_time:          float


class TensorSpec(BaseModel):
    name:  str
    shape: List[int]


class CheckpointHeader(BaseModel):
    format_version:  int
    config:          TrainConfig
    dataset:         str
    epoch:           int
    best_val_rmse:   float
    region_names:    List[str]
    tensors:         List[TensorSpec]


class ForecastRequest(BaseModel):
    series: Optional[Dict[str, List[float]]] = None


class ForecastResponse(BaseModel):
    horizon:   int
    variant:   str
    forecasts: Dict[str, float]


class ModelInfo(BaseModel):
    dataset:       str
    regions:       List[str]
    horizon:       int
    window:        int
    variant:       str
    epoch:         int
    best_val_rmse: float


class GraphResponse(BaseModel):
    regions: List[str]
    variant: str
    weights: List[List[float]]
