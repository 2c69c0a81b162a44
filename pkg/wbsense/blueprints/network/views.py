from flask import jsonify

from wbsense.blueprints.network import network_bp
from wbsense.blueprints.omp.views import stored_sample
from wbsense.models.network_model import forward, load_model, predict_occupancy
from wbsense.models.preprocess_model import Preprocessor
from wbsense.utils.errors import ShapeMismatchError
from wbsense.utils.responses import error_response, request_params, run_path


@network_bp.route('/infer', methods=['POST'])
def infer():
    """Per-band occupancy probabilities for one stored sample.

    JSON body: weights (weights manifest), dataset, index, threshold.
    """
    try:
        params = request_params()
        spec, weights = load_model(run_path(params.get("weights")))
        dataset, index = stored_sample(params.get("dataset"), params.get("index", 0))
        dims = dataset.spec.dims
        if (spec.n_bands, spec.n_snapshots) != (dims.N, dims.Q):
            raise ShapeMismatchError(f"Network expects {spec.n_bands}x{spec.n_snapshots} inputs, dataset has {dims.N}x{dims.Q}")

        x = Preprocessor(dataset.sensing_matrix).transform(dataset.captures[index]).values
        probabilities = forward(spec, weights, x)
        predicted = predict_occupancy(probabilities, float(params.get("threshold", 0.5)))
        return jsonify({
            "status": "success",
            "index": index,
            "probabilities": probabilities.tolist(),
            "predicted": predicted.to_bits(),
            "truth": dataset.masks[index].to_bits(),
        }), 200
    except Exception as e:
        return error_response(e, "running inference")
