"""
GM-DGM Package

This package contains the modules for semi-unsupervised classification with deep
generative models: a small reverse-mode autodiff engine, the M2 and Gaussian-mixture
models, dataset construction, training, evaluation and the command-line entry point.
"""

import os

from dotenv import load_dotenv

# A project .env may point the data and run directories elsewhere
load_dotenv()

# Make sure the data directory exists
DATA_DIR = os.environ.get(
    "GMDGM_DATA_DIR",
    os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data"),
)
RUNS_DIR = os.environ.get("GMDGM_RUNS_DIR", os.path.join(DATA_DIR, "runs"))
os.makedirs(DATA_DIR, exist_ok=True)

__version__ = "0.1.0"
