from flask import Blueprint

dataset_bp = Blueprint('dataset', __name__)

# Views import the blueprint, so they are loaded after it exists
from . import views  # noqa: E402,F401
