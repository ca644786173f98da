"""Process configuration with environment variable overrides.

Defines default values at module level and exposes a Config class that loads
values from environment variables (from ~/.env and the project .env). These
settings cover the process itself (logging, threads, output location); the
experiment parameters live in the INI run files read by settings.py.
"""

import os

import dotenv


# Load environment from multiple locations (later files override earlier)
dotenv.load_dotenv(os.path.expanduser("~/.env"))  # Global user config
dotenv.load_dotenv()  # Project .env


# Defaults
DEBUG = False
VERBOSE = False
LOG_PATH = "goalmask_nav.log"
LOG_LEVEL = "DEBUG" if DEBUG else "INFO"
LOG_ROTATION = "1 week"
LOG_RETENTION = "1 month"

OUTPUT_DIR = "runs"
# When set, replaces every seed in the run file unless --seed is given
DEFAULT_SEED = None

# Torch intra-op threads and the episode/map worker pool
NUM_THREADS = 8
WORKERS = 4


class Config:
    DEBUG = os.getenv("DEBUG", str(DEBUG)).lower() == "true"
    VERBOSE = os.getenv("VERBOSE", str(VERBOSE)).lower() == "true"

    LOG_PATH = os.getenv("LOG_PATH", LOG_PATH)
    LOG_LEVEL = os.getenv("LOG_LEVEL", LOG_LEVEL)
    LOG_ROTATION = os.getenv("LOG_ROTATION", LOG_ROTATION)
    LOG_RETENTION = os.getenv("LOG_RETENTION", LOG_RETENTION)

    OUTPUT_DIR = os.getenv("OUTPUT_DIR", OUTPUT_DIR)
    DEFAULT_SEED = int(os.environ["DEFAULT_SEED"]) if os.getenv("DEFAULT_SEED") else DEFAULT_SEED

    NUM_THREADS = int(os.getenv("NUM_THREADS", str(NUM_THREADS)))
    WORKERS = int(os.getenv("WORKERS", str(WORKERS)))


class TestConfig:
    NUM_THREADS = 1
    WORKERS = 2
