"""Encrypted biometric identification with ternary templates and packed AHE scoring."""

from .errors import *  # noqa: F401,F403  (re-export the exception types)
from .transform import (
    BinarySplit,
    rescaled_cosine,
    sample_pair_exact_angle,
    sample_pair_gaussian,
    split,
    ternarize,
    ternary_inner,
)
from .packing import PackingParams, PackedVector, capacity, decode, encode
from .ahe import (
    CKKS_SIM,
    PAILLIER_2048,
    BackendDescriptor,
    PaillierBackend,
    SimulatedSIMDBackend,
    keygen,
)
from .dbenc import EncryptedBatch, ScorePair, enc_db_base, idface_enc_db, idface_ip_db, ip_db_base
from .protocol import KeyServer, LocalServer, MatchResult, plaintext_identify
from .twopc import ShareSet, gen_share, score_2pc, subvector
from .estimators import IDFaceIdentifier, SecretSharedIdentifier, TernaryTransformer

__version__ = "0.1.0"

__all__ = [
    "BinarySplit", "rescaled_cosine", "sample_pair_exact_angle", "sample_pair_gaussian", "split",
    "ternarize", "ternary_inner",
    "PackingParams", "PackedVector", "capacity", "decode", "encode",
    "CKKS_SIM", "PAILLIER_2048", "BackendDescriptor", "PaillierBackend", "SimulatedSIMDBackend", "keygen",
    "EncryptedBatch", "ScorePair", "enc_db_base", "idface_enc_db", "idface_ip_db", "ip_db_base",
    "KeyServer", "LocalServer", "MatchResult", "plaintext_identify",
    "ShareSet", "gen_share", "score_2pc", "subvector",
    "IDFaceIdentifier", "SecretSharedIdentifier", "TernaryTransformer",
]
