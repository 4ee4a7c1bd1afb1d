# Named synthetic networked-SIR datasets.
# Each preset is a SynthConfig payload plus a short description;
# `synth_config()` validates one into a SynthConfig.

from models.schemas import SynthConfig
from services.errors import ConfigError


def _ring_coupling(n: int, ring: float, chords=(), chord: float = 0.0):
    coupling = [[0.0] * n for _ in range(n)]
    for v in range(n):
        u = (v + 1) % n
        coupling[v][u] = coupling[u][v] = ring
    for a, b in chords:
        coupling[a][b] = coupling[b][a] = chord
    return coupling


SYNTH_PRESETS = {
    "networked-8": {
        "description": "8 regions on a ring with two chords; transmission halves at step 100",
        "config": {
            "name":                "networked-8",
            "n_regions":           8,
            "length":              300,
            "coupling":            _ring_coupling(8, ring=0.05, chords=((0, 4), (2, 6)), chord=0.02),
            "beta_schedule":       [{"start": 0.0, "beta": 0.3}, {"start": 100.0, "beta": 0.15}],
            "gamma":               0.1,
            "population":          [1e5] * 8,
            "initial_infected":    [50.0, 0.0, 10.0, 0.0, 0.0, 5.0, 0.0, 0.0],
            "noise_std":           0.0,
            "noise_peak_fraction": 0.02,
            "seed":                7,
        },
    },
    "tiny-4": {
        "description": "4 regions on a ring; quick smoke-test dataset",
        "config": {
            "name":                "tiny-4",
            "n_regions":           4,
            "length":              160,
            "coupling":            _ring_coupling(4, ring=0.05),
            "beta_schedule":       [{"start": 0.0, "beta": 0.35}],
            "gamma":               0.1,
            "population":          [5e4] * 4,
            "initial_infected":    [20.0, 0.0, 5.0, 0.0],
            "noise_std":           0.0,
            "noise_peak_fraction": 0.02,
            "seed":                3,
        },
    },
}


def synth_config(name: str) -> SynthConfig:
    if name not in SYNTH_PRESETS:
        raise ConfigError(f"unknown preset '{name}', expected one of {sorted(SYNTH_PRESETS)}")
    return SynthConfig(**SYNTH_PRESETS[name]["config"])
