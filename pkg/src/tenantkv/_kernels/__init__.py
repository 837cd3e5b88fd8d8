"""Kernel selection: compiled extension when built, pure Python otherwise.

Set TENANTKV_PURE_PYTHON=1 to force the fallback (used by the kernel
benchmark and the cross-implementation tests).
"""

import os

from . import pykernels

if os.environ.get("TENANTKV_PURE_PYTHON") == "1":
    _impl = pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = pykernels

IMPL = _impl.IMPL
fnv1a64 = _impl.fnv1a64
route_child = _impl.route_child
bloom_insert = _impl.bloom_insert
bloom_query = _impl.bloom_query
bloom_insert_many = _impl.bloom_insert_many
encoded_size = _impl.encoded_size
encode_record = _impl.encode_record
decode_record = _impl.decode_record
decode_records = _impl.decode_records


def available_impls():
    """All kernel implementations importable in this environment."""
    impls = {"python": pykernels}
    try:
        from . import _ckernels
        impls["cython"] = _ckernels
    except ImportError:
        pass
    return impls
