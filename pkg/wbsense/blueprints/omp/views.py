from flask import jsonify

from wbsense.blueprints.omp import omp_bp
from wbsense.models.omp_model import OmpConfig, omp_recover
from wbsense.models.signal_model import load_dataset
from wbsense.utils.errors import InvalidInputError
from wbsense.utils.responses import error_response, request_params, run_path


def stored_sample(dataset_name, index):
    dataset = load_dataset(run_path(dataset_name))
    index = int(index)
    if not 0 <= index < len(dataset):
        raise InvalidInputError(f"Sample index {index} is out of range [0, {len(dataset)})")
    return dataset, index


@omp_bp.route('/recover', methods=['POST'])
def recover():
    """Run OMP on one stored sample.

    JSON body:
        - dataset: dataset folder relative to the output directory.
        - index: sample index (default 0).
        - sparsity: known sparsity, or
        - epsilon: residual threshold. Without either the true sparsity is used.
    """
    try:
        params = request_params()
        dataset, index = stored_sample(params.get("dataset"), params.get("index", 0))
        cap, mask = dataset.captures[index], dataset.masks[index]

        if params.get("epsilon") is not None:
            config = OmpConfig.residual_threshold(float(params["epsilon"]))
        elif params.get("sparsity") is not None:
            config = OmpConfig.known_sparsity(int(params["sparsity"]))
        else:
            config = OmpConfig.true_sparsity(max(mask.popcount, 1), dataset.spec.dims.K)

        result = omp_recover(dataset.sensing_matrix, cap, config)
        return jsonify({
            "status": "success",
            "index": index,
            "snr_db": cap.snr_db,
            "occupied_bands": result.occupied_bands,
            "residual_norms": result.residual_norms,
            "predicted": result.to_mask(dataset.spec.dims.N).to_bits(),
            "truth": mask.to_bits(),
        }), 200
    except Exception as e:
        return error_response(e, "running OMP")
