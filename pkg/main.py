import os
import logging
import sys
from dotenv import load_dotenv
from cli.runner import run_cli

# Load environment defaults (BOHM_OUTPUT_DIR, BOHM_LOG_LEVEL)
load_dotenv("config/settings.env")

# Configure logging
logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=os.getenv("BOHM_LOG_LEVEL", "INFO").upper()
)
logger = logging.getLogger(__name__)


def main():
    status = run_cli()
    if status:
        logger.error(f"Run failed with exit status {status}")
    return status


if __name__ == "__main__":
    sys.exit(main())
