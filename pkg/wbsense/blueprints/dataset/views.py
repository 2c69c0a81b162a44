import pandas as pd
from flask import jsonify

from wbsense.blueprints.dataset import dataset_bp
from wbsense.utils.responses import error_response, request_params, run_path
from wbsense.utils.storage import manifest_paths, read_json


@dataset_bp.route('/manifest', methods=['GET'])
def get_manifest():
    """Summary of a stored dataset manifest.

    Query params:
        - path: dataset folder (or manifest) relative to the output directory.

    Returns:
        JSON with the manifest header and per-(snr, sparsity) sample counts;
        the per-sample records are left out.
    """
    try:
        manifest_path, _ = manifest_paths(run_path(request_params().get("path")))
        manifest = read_json(manifest_path)
        samples = manifest.get("samples", [])
        header = {k: v for k, v in manifest.items() if k != "samples"}

        cells = []
        if samples:
            frame = pd.DataFrame(samples)
            frame["sparsity"] = frame["mask"].str.count("1")
            counts = frame.groupby(["snr_db", "sparsity"]).size().reset_index(name="samples")
            cells = counts.to_dict(orient="records")

        return jsonify({"status": "success", "manifest": header, "cells": cells}), 200
    except Exception as e:
        return error_response(e, "reading dataset manifest")
