"""Key-value/pub-sub co-simulation layer speaking a RESP2-compatible subset."""

from .schema import ValidationError, validate_message, canonical_payload  # noqa: F401
from .server import CosimServer  # noqa: F401
