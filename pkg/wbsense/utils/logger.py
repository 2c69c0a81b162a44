import logging
import os
from logging.handlers import RotatingFileHandler

from wbsense.utils.settings import ENV_MODE, LOG_DIR, LOG_LEVEL

# Create log directory if it doesn't exist
if not os.path.exists(LOG_DIR):
    os.makedirs(LOG_DIR)

LOG_FILE = os.path.join(LOG_DIR, "wbsense.log")

logger = logging.getLogger("wbsense")

formatter = logging.Formatter("%(asctime)s [%(levelname)s] - %(module)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S")

# Rotating file handler (max size 50MB, 1 backup)
file_handler = RotatingFileHandler(LOG_FILE, maxBytes=50 * 1024 * 1024, backupCount=1)
file_handler.setFormatter(formatter)
logger.addHandler(file_handler)

# Long runs (training, sweeps) are usually watched from a terminal
stream_handler = logging.StreamHandler()
stream_handler.setFormatter(formatter)
stream_handler.setLevel(logging.WARNING)
logger.addHandler(stream_handler)

if LOG_LEVEL:
    logger.setLevel(LOG_LEVEL.upper())
elif ENV_MODE == "production":
    logger.setLevel(logging.WARNING)
else:
    logger.setLevel(logging.DEBUG)

logger.propagate = False

logger.info(f"Logger initialized in {ENV_MODE} mode")
