from flask import Flask
from flask_cors import CORS

from wbsense.utils import settings
from wbsense.utils.logger import logger


def create_app(overrides=None):
    """Flask app exposing the compute-only engines under /api/v1.

    ``overrides`` is merged into ``app.config`` after the environment
    settings, which is how tests point OUTPUT_DIR at a temporary folder.
    """
    app = Flask(__name__)

    app.config["ENV_MODE"] = settings.ENV_MODE
    app.config["OUTPUT_DIR"] = settings.OUTPUT_DIR
    app.config["DEFAULT_SEED"] = settings.DEFAULT_SEED
    if overrides:
        app.config.update(overrides)

    CORS(app, origins=settings.CORS_ORIGINS, supports_credentials=True)

    from wbsense.blueprints.complexity import complexity_bp
    from wbsense.blueprints.dataset import dataset_bp
    from wbsense.blueprints.network import network_bp
    from wbsense.blueprints.omp import omp_bp
    from wbsense.blueprints.quantization import quantization_bp
    from wbsense.blueprints.tiling import tiling_bp

    app.register_blueprint(complexity_bp, url_prefix="/api/v1/complexity")
    app.register_blueprint(tiling_bp, url_prefix="/api/v1/tiling")
    app.register_blueprint(quantization_bp, url_prefix="/api/v1/quantization")
    app.register_blueprint(dataset_bp, url_prefix="/api/v1/dataset")
    app.register_blueprint(omp_bp, url_prefix="/api/v1/omp")
    app.register_blueprint(network_bp, url_prefix="/api/v1/network")

    logger.info("Registered URLs:")
    for rule in app.url_map.iter_rules():
        logger.info(rule)

    return app
