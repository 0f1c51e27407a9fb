from .coder import (
    PROB_BITS,
    PROB_TOTAL,
    RangeDecoder,
    RangeEncoder,
    ac_decode,
    ac_encode,
    active_backend,
    pmf_to_cdf,
    uniform_cdf,
    validate_cdf,
)
from .codestream import DecodeError, decode_tensor, encode_tensor, symbol_checksum
from .container import (
    FLAG_BEST_EFFORT,
    FLAG_BIAS_INDICES,
    Bitstream,
    ContainerError,
    header_size,
    parse_container,
    serialize_container,
)
