"""
ES-Cells - robust exponential-smoothing cells for time-series analysis
"""

import sys

from dotenv import load_dotenv

from app.api.commands import run
from app.telemetry import setup_logging, setup_tracing

# Load environment variables from .env file
# Variables already present in the environment are not overridden
load_dotenv()


def main() -> int:
    setup_logging()
    provider = setup_tracing()
    try:
        return run(sys.argv[1:])
    finally:
        if provider is not None:
            provider.shutdown()


if __name__ == "__main__":
    sys.exit(main())
