from flask import jsonify

from wbsense.blueprints.complexity.views import network_from_params
from wbsense.blueprints.tiling import tiling_bp
from wbsense.models.tiling_model import MIB, ConvGeometry, TilingConfig, footprint, no_tiling_footprint
from wbsense.utils.errors import InvalidInputError
from wbsense.utils.responses import error_response, request_params

GEOMETRY_FIELDS = ("rows", "in_length", "taps", "in_channels", "out_channels")


def _tiling_config(params):
    cfg = params.get("cfg")
    if cfg is None and any(k in params for k in ("To", "Ti", "Tr", "Tc")):
        cfg = {k: params.get(k) for k in ("To", "Ti", "Tr", "Tc")}
    return TilingConfig.model_validate(cfg) if cfg is not None else TilingConfig.reference_config()


def _geometry(params):
    if "geometry" in params:
        geometry = params["geometry"]
        missing = [f for f in GEOMETRY_FIELDS if f not in geometry]
        if missing:
            raise InvalidInputError(f"Geometry is missing {missing}")
        return ConvGeometry(**{f: int(geometry[f]) for f in GEOMETRY_FIELDS})
    spec = network_from_params(params)
    layer = int(params.get("layer", 0))
    if not 0 <= layer < len(spec.conv_layers):
        raise InvalidInputError(f"Layer {layer} does not exist; the network has {len(spec.conv_layers)} conv layers")
    return ConvGeometry.from_spec(spec, layer)


@tiling_bp.route('/footprint', methods=['GET', 'POST'])
def tile_footprint():
    """On-chip buffer sizes for one conv layer under a tiling.

    Params:
        network / spec / layer: which layer (default full layer 0), or an
            explicit ``geometry`` object.
        cfg (or To, Ti, Tr, Tc): tiling factors, default <20,16,20,20>.
        word_bits: default 32.
    """
    try:
        params = request_params()
        geometry = _geometry(params)
        cfg = _tiling_config(params)
        word_bits = int(params.get("word_bits", 32))
        return jsonify({
            "status": "success",
            "cfg": cfg.model_dump(),
            "word_bits": word_bits,
            "footprint": footprint(geometry, cfg, word_bits).as_dict(),
        }), 200
    except Exception as e:
        return error_response(e, "computing tile footprint")


@tiling_bp.route('/no_tiling_footprint', methods=['GET', 'POST'])
def whole_network_footprint():
    """Bits needed to keep all weights, biases and the input on chip."""
    try:
        params = request_params()
        spec = network_from_params(params)
        word_bits = int(params.get("word_bits", 32))
        bits = no_tiling_footprint(spec, word_bits)
        return jsonify({"status": "success", "word_bits": word_bits, "bits": bits, "mib": bits / MIB}), 200
    except Exception as e:
        return error_response(e, "computing untiled footprint")
