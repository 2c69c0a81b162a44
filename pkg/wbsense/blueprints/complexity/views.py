from flask import jsonify

from wbsense.blueprints.complexity import complexity_bp
from wbsense.models.metrics_model import ComplexityParams, dlwss_op_count, omp_op_count
from wbsense.models.network_model import NetworkSpec
from wbsense.utils.errors import InvalidInputError
from wbsense.utils.responses import error_response, request_params

NETWORK_PRESETS = {"full": NetworkSpec.full, "desk": NetworkSpec.desk, "tiny": NetworkSpec.tiny}


def network_from_params(params):
    """NetworkSpec from a ``spec`` object or a ``network`` preset name (default full)."""
    if "spec" in params:
        return NetworkSpec.model_validate(params["spec"])
    name = params.get("network", "full")
    if name not in NETWORK_PRESETS:
        raise InvalidInputError(f"Unknown network preset {name!r}; choose from {sorted(NETWORK_PRESETS)}")
    return NETWORK_PRESETS[name]()


@complexity_bp.route('/omp', methods=['GET', 'POST'])
def omp_complexity():
    """Analytic OMP operation counts.

    Params (query or JSON body): K, N, Q, P.

    Returns:
        JSON with the per-step counts, the total and the dominant step.
    """
    try:
        params = ComplexityParams.model_validate(request_params())
        return jsonify({"status": "success", "params": params.model_dump(), "counts": omp_op_count(params)}), 200
    except Exception as e:
        return error_response(e, "computing OMP complexity")


@complexity_bp.route('/dlwss', methods=['GET', 'POST'])
def dlwss_complexity():
    """Per-layer operation counts of one CNN forward pass."""
    try:
        spec = network_from_params(request_params())
        return jsonify({"status": "success", "counts": dlwss_op_count(spec)}), 200
    except Exception as e:
        return error_response(e, "computing network complexity")
