"""scikit-learn style wrappers.

``TernaryTransformer`` is a stateless transformer.  The identifiers treat
``fit`` as enrolment (``X`` templates, ``y`` identity labels) and
``predict`` as identification, returning ``reject_label`` when no enrolled
template clears the threshold.
"""

from __future__ import annotations

import random

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ahe import PaillierBackend, SimulatedSIMDBackend, keygen
from .protocol import InProcessChannel, KeyServer, LocalServer, Transcript
from .transform import ternarize
from .twopc import make_in_process_parties

__all__ = ["TernaryTransformer", "IDFaceIdentifier", "SecretSharedIdentifier"]


def _templates(est, X, reset: bool):
    X = check_array(X, dtype=np.float64)
    if reset:
        est.n_features_in_ = X.shape[1]
    elif X.shape[1] != est.n_features_in_:
        raise ValueError(f"X has {X.shape[1]} features, expected {est.n_features_in_}")
    return X


class TernaryTransformer(TransformerMixin, BaseEstimator):
    """Map each row to {-1, 0, 1}^d keeping the signs of its ``k`` largest magnitudes."""

    def __init__(self, k: int = 341):
        self.k = k

    def fit(self, X, y=None):
        X = _templates(self, X, reset=True)
        if not 1 <= self.k <= X.shape[1]:
            raise ValueError(f"k={self.k} outside [1, {X.shape[1]}]")
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return ternarize(_templates(self, X, reset=False), self.k)


class IDFaceIdentifier(ClassifierMixin, BaseEstimator):
    """Encrypted two-server identification with both roles in one process.

    Parameters
    ----------
    alpha, beta : int
        Nonzero counts for enrolled and query templates (``beta <= alpha``).
    tau : float
        Cosine threshold; a match needs ``score > ceil(tau * sqrt(alpha * beta))``.
    backend : {"paillier", "insecure-mock"}
        ``"insecure-mock"`` selects the simulated SIMD backend, which offers
        no confidentiality and only reproduces slot accounting.
    modulus_bits : int
        Paillier modulus size.
    slot_count : int
        Slots per Paillier ciphertext (1 is the plain scheme).
    fast_randomness : bool
        Use fixed-base precomputation for encryption randomness.
    random_state : int or None
    threads : int
        Worker threads for batch scoring.
    reject_label : object
        Returned by ``predict`` on rejection.
    """

    def __init__(self, alpha: int = 341, beta: int = 63, tau: float = 0.5, backend: str = "paillier",
                 modulus_bits: int = 2048, slot_count: int = 1, fast_randomness: bool = True,
                 random_state=None, threads: int = 1, reject_label=None):
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.backend = backend
        self.modulus_bits = modulus_bits
        self.slot_count = slot_count
        self.fast_randomness = fast_randomness
        self.random_state = random_state
        self.threads = threads
        self.reject_label = reject_label

    def _make_backend(self):
        rng = None if self.random_state is None else random.Random(self.random_state)
        if self.backend == "insecure-mock":
            return SimulatedSIMDBackend("insecure-mock", rng=rng)
        if self.backend != "paillier":
            raise ValueError(f"unknown backend {self.backend!r}")
        kp = keygen(self.modulus_bits, rng=rng)
        be = PaillierBackend.from_keypair(kp, slot_count=self.slot_count, rng=rng)
        if self.fast_randomness:
            be.public.enable_fast_randomness(rng)
        return be

    def fit(self, X, y=None):
        X = _templates(self, X, reset=True)
        ids = np.arange(X.shape[0]) if y is None else np.asarray(y)
        if len(ids) != X.shape[0]:
            raise ValueError("X and y differ in length")
        be = self._make_backend()
        self.key_server_ = KeyServer(be)
        self.transcript_ = Transcript()
        self.local_server_ = LocalServer(be, X.shape[1], self.alpha, self.beta, self.tau,
                                         channel=InProcessChannel(self.key_server_.handle, self.transcript_),
                                         threads=self.threads)
        self.local_server_.enroll(X, ids.tolist())
        self.classes_ = np.asarray(ids)
        return self

    def partial_fit(self, X, y):
        """Enroll more templates into an already fitted database."""
        check_is_fitted(self, "local_server_")
        X = _templates(self, X, reset=False)
        self.local_server_.enroll(X, list(y))
        self.classes_ = np.concatenate([self.classes_, np.asarray(y)])
        return self

    def predict(self, X):
        check_is_fitted(self, "local_server_")
        X = _templates(self, X, reset=False)
        out = []
        for row in X:
            res = self.local_server_.identify(row)
            out.append(res.identity if res.accepted else self.reject_label)
        return np.asarray(out, dtype=object)


class SecretSharedIdentifier(ClassifierMixin, BaseEstimator):
    """XOR-shared identification among ``parties`` in-process servers."""

    def __init__(self, alpha: int = 341, beta: int = 63, tau: float = 0.5, parties: int = 2,
                 random_state=None, reject_label=None):
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.parties = parties
        self.random_state = random_state
        self.reject_label = reject_label

    def fit(self, X, y=None):
        X = _templates(self, X, reset=True)
        ids = np.arange(X.shape[0]) if y is None else np.asarray(y)
        if len(ids) != X.shape[0]:
            raise ValueError("X and y differ in length")
        self.transcript_ = Transcript()
        self.initiator_, self.helpers_ = make_in_process_parties(
            X.shape[1], self.alpha, self.beta, self.parties, self.tau, self.random_state, self.transcript_)
        for row, ident in zip(X, ids):
            self.initiator_.enroll(row, str(ident))
        self.classes_ = ids
        self._by_name = {str(i): i for i in ids.tolist()}
        return self

    def decision_function(self, X):
        """Integer ternary scores against every enrolled identity, one row per query."""
        check_is_fitted(self, "initiator_")
        X = _templates(self, X, reset=False)
        return np.vstack([self.initiator_.scores(row) for row in X])

    def predict(self, X):
        check_is_fitted(self, "initiator_")
        X = _templates(self, X, reset=False)
        out = []
        for row in X:
            res = self.initiator_.identify(row)
            out.append(self._by_name[res.identity] if res.accepted else self.reject_label)
        return np.asarray(out, dtype=object)
