from wbsense import create_app
from wbsense.utils import settings
from wbsense.utils.logger import logger

# Create the Flask app (gunicorn entry point: run:app)
app = create_app()


def run_app():
    logger.info(f"Running app in {settings.ENV_MODE} mode")
    return app


# Development server
if __name__ == '__main__':
    debug = settings.ENV_MODE == "development"
    app.run(host='0.0.0.0', port=5000, debug=debug, use_reloader=debug)
