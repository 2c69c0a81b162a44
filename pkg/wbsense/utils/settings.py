import os
from dotenv import load_dotenv

# Load environment variables from .env so runs can be configured without flags
load_dotenv()

ENV_MODE = os.getenv("WBSENSE_ENV", "development")
LOG_LEVEL = os.getenv("WBSENSE_LOG_LEVEL")
LOG_DIR = os.getenv("WBSENSE_LOG_DIR", os.path.join(os.getcwd(), "log"))
OUTPUT_DIR = os.getenv("WBSENSE_OUTPUT_DIR", os.path.join(os.getcwd(), "runs"))
DEFAULT_SEED = int(os.getenv("WBSENSE_DEFAULT_SEED", "0"))
SHOW_PROGRESS = os.getenv("WBSENSE_PROGRESS", "true").lower() == "true"
CORS_ORIGINS = [o.strip() for o in os.getenv("WBSENSE_CORS_ORIGINS", "http://localhost:5173").split(",") if o.strip()]
