from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from config import configure_logging
from routers import forecast, synth

configure_logging()

app = FastAPI(
    title="EARTH — epidemic forecasting",
    description="Epidemic-aware neural ODE with a dynamic transmission graph",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"]
)

app.include_router(synth.router)
app.include_router(forecast.router)


@app.get("/")
def root():
    return {
        "status":  "ok",
        "message": "EARTH forecasting API is running",
        "docs":    "/docs"
    }
