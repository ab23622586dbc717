"""Entropy coding and the packed scene bitstream."""

from .bitstream import (
    MAGIC, VERSION, CameraRecord, SceneBitstream, deflate, deflate_roundtrip, inflate, layout,
    naive_tensor_compress, naive_tensor_decompress, pack, unpack,
)
from .errors import BitstreamError, RangeCoderError
from .rangecoder import (
    BACKENDS, PRECISION, TOTAL, CdfTable, backend, gaussian_pmf, ideal_bits,
    quantize_cdf, quantize_pmf, rc_decode, rc_encode,
)
