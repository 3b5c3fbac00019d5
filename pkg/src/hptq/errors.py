"""Exception hierarchy. Every load/validation failure carries a stable code string."""


class HptqError(Exception):
    """Base class for all toolkit errors."""

    code = "error"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ContainerError(HptqError):
    """Malformed or unreadable model/dataset container.

    Codes: bad_magic, version_mismatch, truncated, bad_dtype,
    missing_quant_params, bad_manifest.
    """

    code = "container"


class GraphError(HptqError):
    """Invalid graph topology or shapes.

    Codes: dangling_edge, duplicate_producer, not_topological,
    shape_mismatch, unsupported_op, bad_params.
    """

    code = "graph"


class StatsError(HptqError):
    """Statistics collection failure (non-finite activations, empty data)."""

    code = "stats"


class PipelineError(HptqError):
    """Pipeline stage failure; message names the stage and layer."""

    code = "pipeline"
