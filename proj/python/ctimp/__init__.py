"""Python access to the pattern parser, asset-map validator, SIGMA compiler
and healing-policy decision of the ctimp core library."""

from ._ctimp import (
    PatternError,
    ValidationError,
    compile_indicator,
    decide,
    parse_pattern,
    render_pattern,
    validate_map,
)

__all__ = [
    "PatternError",
    "ValidationError",
    "compile_indicator",
    "decide",
    "parse_pattern",
    "render_pattern",
    "validate_map",
]
