from flask import Blueprint

network_bp = Blueprint('network', __name__)

# Views import the blueprint, so they are loaded after it exists
from . import views  # noqa: E402,F401
