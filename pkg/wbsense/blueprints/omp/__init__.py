from flask import Blueprint

omp_bp = Blueprint('omp', __name__)

# Views import the blueprint, so they are loaded after it exists
from . import views  # noqa: E402,F401
