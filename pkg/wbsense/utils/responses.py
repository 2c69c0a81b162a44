from pathlib import Path

from flask import current_app, jsonify, request
from pydantic import ValidationError
from werkzeug.utils import secure_filename

from wbsense.utils.errors import InvalidInputError, SensingError
from wbsense.utils.logger import logger


def request_params():
    """JSON body of a POST, query string of a GET."""
    if request.method == "POST":
        body = request.get_json(silent=True)
        if body is None:
            return {}
        if not isinstance(body, dict):
            raise InvalidInputError("Request body must be a JSON object")
        return body
    return request.args.to_dict()


def run_path(name):
    """Resolve a dataset or weights name inside the configured output folder.

    Every path component goes through ``secure_filename`` so requests cannot
    leave OUTPUT_DIR.
    """
    if not name:
        raise InvalidInputError("Missing file name")
    parts = [secure_filename(p) for p in str(name).replace("\\", "/").split("/") if p not in ("", ".")]
    if not parts or not all(parts):
        raise InvalidInputError(f"Invalid file name {name!r}")
    return Path(current_app.config["OUTPUT_DIR"]).joinpath(*parts)


def error_response(e, action):
    if isinstance(e, ValidationError):
        logger.error(f"Invalid parameters while {action}: {e}")
        return jsonify({"status": "error", "message": "Invalid parameters", "details": e.errors(include_url=False, include_context=False, include_input=False)}), 400
    if isinstance(e, SensingError):
        logger.error(f"Error {action}: {e.message}")
        return jsonify({"status": "error", "message": e.message}), e.http_status
    if isinstance(e, (TypeError, ValueError)):
        logger.error(f"Bad parameter while {action}: {e}")
        return jsonify({"status": "error", "message": "Invalid parameters", "details": str(e)}), 400
    logger.error(f"Unexpected error {action}: {e}")
    return jsonify({"status": "error", "message": f"Error {action}", "details": str(e)}), 500
