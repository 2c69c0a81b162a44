import numpy as np
from flask import jsonify

from wbsense.blueprints.quantization import quantization_bp
from wbsense.models.quantization_model import FixedPointFormat, SaturationStats, min_integer_bits, quantize
from wbsense.utils.errors import InvalidInputError
from wbsense.utils.responses import error_response, request_params


@quantization_bp.route('/quantize', methods=['POST'])
def quantize_values():
    """Round values onto a <W, I> grid.

    JSON body:
        - values: number or (nested) list of numbers.
        - W, I: word length and sign-inclusive integer bits.

    Returns:
        JSON with the quantized values, the step and the number of saturated values.
    """
    try:
        params = request_params()
        if "values" not in params:
            raise InvalidInputError("Missing required field: values")
        fmt = FixedPointFormat(W=params.get("W"), I=params.get("I"))
        values = np.asarray(params["values"], dtype=np.float64)
        stats = SaturationStats()
        quantized = quantize(values, fmt, stats)
        return jsonify({
            "status": "success",
            "format": str(fmt),
            "step": fmt.step,
            "values": np.asarray(quantized).tolist(),
            "saturated": stats.total,
        }), 200
    except Exception as e:
        return error_response(e, "quantizing values")


@quantization_bp.route('/min_integer_bits', methods=['GET', 'POST'])
def integer_bits():
    """Smallest integer bit count for a value range.

    Either ``min`` and ``max`` (query or body) or a ``ranges`` list of
    [min, max] pairs in the body.
    """
    try:
        params = request_params()
        if "ranges" in params:
            pairs = [(float(low), float(high)) for low, high in params["ranges"]]
        elif "min" in params and "max" in params:
            pairs = [(float(params["min"]), float(params["max"]))]
        else:
            raise InvalidInputError("Provide min and max, or a list of ranges")
        bits = [min_integer_bits(low, high) for low, high in pairs]
        return jsonify({"status": "success", "ranges": [list(p) for p in pairs], "i_min": bits}), 200
    except Exception as e:
        return error_response(e, "computing integer bits")
