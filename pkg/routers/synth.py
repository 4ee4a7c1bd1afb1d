from fastapi import APIRouter, HTTPException
from data.presets import SYNTH_PRESETS

router = APIRouter(prefix="/synth", tags=["synth"])


@router.get("/presets")
def list_presets():
    """Return all synthetic dataset presets with their headline settings."""
    return [
        {
            "name":        name,
            "description": preset["description"],
            "n_regions":   preset["config"]["n_regions"],
            "length":      preset["config"]["length"],
            "gamma":       preset["config"]["gamma"],
            "seed":        preset["config"]["seed"]
        }
        for name, preset in SYNTH_PRESETS.items()
    ]


@router.get("/presets/{name}")
def get_preset(name: str):
    """Full SynthConfig payload of one preset."""
    if name not in SYNTH_PRESETS:
        raise HTTPException(status_code=404, detail=f"Preset '{name}' not found")
    return SYNTH_PRESETS[name]
