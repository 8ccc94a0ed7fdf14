"""Two-layer linear prognostic head over per-slice latents.

Layer one maps each slice latent z_n to M features with its own matrix
W1[n] (M x D); layer two scores each class with a row W2[c] over all N*M
features, flattened as index n*M + m. Neither layer has a bias, so a class
score is exactly the sum of its per-feature contributions.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from . import tensor as T
from .metrics import auc
from .nn import Adam
from .rng import make_rng, truncated_normal
from .validation import ShapeError


def slice_regions(n_volume, n_regions):
    """Contiguous, maximally even partition of slice indices into regions."""
    if n_volume < n_regions:
        raise ValueError(f"volume has {n_volume} slices, fewer than {n_regions} regions")
    return np.array_split(np.arange(n_volume), n_regions)


def sample_slices(n_volume, n_regions, rng):
    """One uniformly drawn slice index per region, in region order."""
    return np.array([r[rng.integers(len(r))] for r in slice_regions(n_volume, n_regions)])


def region_centers(n_volume, n_regions):
    return np.array([r[len(r) // 2] for r in slice_regions(n_volume, n_regions)])


def weighted_loss(y, target, floor=1e-12):
    """Mean of -(1 - p_i) log p_i over a batch of score rows ``y`` (Tensor or array)."""
    y = T.as_tensor(y)
    if y.data.ndim == 1:
        y = y.reshape(1, -1)
    target = np.atleast_1d(np.asarray(target, dtype=int))
    if target.min() < 0 or target.max() >= y.shape[1]:
        raise IndexError(f"class index out of range 0..{y.shape[1] - 1}")
    p = T.softmax(y, axis=1)
    p_true = p[np.arange(len(target)), target]
    per_case = (1.0 - p_true) * T.log(p_true, floor)
    return T.mul(T.mean(per_case), -1.0)


def softmax(y):
    e = np.exp(y - y.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class PrognosticHead(ClassifierMixin, BaseEstimator):
    """Bias-free two-layer linear classifier on (cases, slices, latent_dim) stacks.

    ``fit`` accepts volumes with at least ``n_slices`` latents per case; each
    epoch draws one slice per region, evaluation uses region centres. The
    returned weights are those of the epoch with the highest validation AUC.
    """

    def __init__(self, n_slices=4, n_features=2, n_classes=2, learning_rate=1e-2,
                 batch_size=8, epochs=70, random_state=0):
        self.n_slices = n_slices
        self.n_features = n_features
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    # -- weights --

    def init_weights(self, latent_dim):
        rng = make_rng(self.random_state, "head-init")
        N, M, C = self.n_slices, self.n_features, self.n_classes
        self.W1_ = truncated_normal(rng, (N, M, latent_dim), 1.0 / np.sqrt(latent_dim))
        self.W2_ = truncated_normal(rng, (C, N * M), 1.0 / np.sqrt(N * M))
        self.latent_dim_ = latent_dim
        self.classes_ = np.arange(C)
        return self

    def set_weights(self, W1, W2):
        W1 = np.asarray(W1, dtype=np.float32)
        W2 = np.asarray(W2, dtype=np.float32)
        N, M, C = self.n_slices, self.n_features, self.n_classes
        if W1.ndim != 3 or W1.shape[:2] != (N, M) or W2.shape != (C, N * M):
            raise ShapeError("head weights", W1.shape, W2.shape)
        self.W1_, self.W2_ = W1, W2
        self.latent_dim_ = W1.shape[2]
        self.classes_ = np.arange(C)
        return self

    # -- forward passes (float64, exact decomposition) --

    def _select(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim == 2:
            Z = Z[None]
        if Z.ndim != 3 or Z.shape[1] < self.n_slices or Z.shape[2] != self.latent_dim_:
            raise ShapeError("case latents", Z.shape, ("cases", f">={self.n_slices}", self.latent_dim_))
        if Z.shape[1] != self.n_slices:
            Z = Z[:, region_centers(Z.shape[1], self.n_slices)]
        return Z

    def transform(self, Z):
        """Features s, shape (cases, N*M); s[:, n*M + m] = <W1[n, m], z_n>."""
        check_is_fitted(self, "W1_")
        Z = self._select(Z)
        W1 = self.W1_.astype(np.float64)
        # per-slice products so s_n depends on z_n alone
        return np.concatenate([Z[:, n] @ W1[n].T for n in range(self.n_slices)], axis=1)

    def scores(self, s):
        check_is_fitted(self, "W2_")
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s.shape[1] != self.n_slices * self.n_features:
            raise ShapeError("scores", s.shape, ("cases", self.n_slices * self.n_features))
        # summed contributions rather than a BLAS dot, so scores equal sum(v_c) to the last bit
        return (s[:, None, :] * self.W2_.astype(np.float64)[None]).sum(axis=2)

    def decision_function(self, Z):
        return self.scores(self.transform(Z))

    def predict_proba(self, Z):
        return softmax(self.decision_function(Z))

    def predict(self, Z):
        return np.argmax(self.decision_function(Z), axis=1)

    # -- training --

    def _loss(self, W1, W2, Zb, yb):
        M = self.n_features
        y = None
        for n in range(self.n_slices):
            s_n = T.Tensor(Zb[:, n]) @ W1[n].T
            term = s_n @ W2[:, n * M:(n + 1) * M].T
            y = term if y is None else y + term
        return weighted_loss(y, yb)

    def fit(self, Z, y, Z_val=None, y_val=None):
        Z = np.asarray(Z, dtype=np.float32)
        if Z.ndim != 3 or Z.shape[1] < self.n_slices:
            raise ShapeError("fit latents", Z.shape, ("cases", f">={self.n_slices}", "D"))
        y = np.asarray(y, dtype=int)
        if len(Z) == 0 or len(Z) != len(y):
            raise ValueError("training split is empty or misaligned")
        if Z_val is None:
            Z_val, y_val = Z, y
        if len(Z_val) == 0:
            raise ValueError("validation split is empty")
        self.init_weights(Z.shape[2])
        W1 = [T.Tensor(w, requires_grad=True) for w in self.W1_]
        W2 = T.Tensor(self.W2_, requires_grad=True)
        adam = Adam(W1 + [W2], lr=self.learning_rate)
        rng = make_rng(self.random_state, "head-train")
        self.history_ = []
        best = (-np.inf, None)
        for epoch in range(self.epochs):
            order = rng.permutation(len(Z))
            picks = np.stack([sample_slices(Z.shape[1], self.n_slices, rng) for _ in range(len(Z))])
            losses = []
            for i in range(0, len(Z), self.batch_size):
                b = order[i:i + self.batch_size]
                Zb = Z[b[:, None], picks[b]]
                loss = self._loss(W1, W2, Zb, y[b])
                T.backward(loss)
                adam.step()
                losses.append(loss.item())
            self.W1_ = np.stack([w.data for w in W1])
            self.W2_ = W2.data.copy()
            val_auc = auc(y_val, self.predict_proba(Z_val)[:, 1]) if self.n_classes == 2 else np.nan
            self.history_.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_auc": val_auc})
            if val_auc > best[0]:
                best = (val_auc, (self.W1_.copy(), self.W2_.copy(), epoch + 1))
        self.best_val_auc_ = best[0]
        self.W1_, self.W2_, self.best_epoch_ = best[1]
        return self

    # -- persistence --

    def save(self, path):
        check_is_fitted(self, "W1_")
        rec = {"config.n_slices": [self.n_slices], "config.n_features": [self.n_features],
               "config.n_classes": [self.n_classes], "config.latent_dim": [self.latent_dim_]}
        rec = {k: np.array(v, dtype=np.float32) for k, v in rec.items()}
        for n in range(self.n_slices):
            rec[f"w1.{n}"] = self.W1_[n]
        for c in range(self.n_classes):
            rec[f"w2.{c}"] = self.W2_[c]
        checkpoint.save(path, rec)

    @classmethod
    def load(cls, path):
        rec = checkpoint.load(path)
        cfg = {k: int(round(float(rec[f"config.{k}"][0]))) for k in ("n_slices", "n_features", "n_classes")}
        head = cls(**cfg)
        W1 = np.stack([rec[f"w1.{n}"] for n in range(cfg["n_slices"])])
        W2 = np.stack([rec[f"w2.{c}"] for c in range(cfg["n_classes"])])
        return head.set_weights(W1, W2)
