"""Quality metrics: data mismatch, balanced accuracy, ensemble RMSE/spread,
the Frechet distance on reservoir-classifier features, and the static
geostatistical suite (variogram, connectivity, histogram KL, PCA spectrum
correlation, MDS embedding MMD).

All metric functions are pure; the classifier is a small convolutional net
trained on synthetic realizations labeled by their generator parameters
(orientation and channel-density buckets), with the penultimate dense
activations as the feature layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from .errors import ConfigError, NumericalError
from .fields import Dataset
from .nn import AdamState, LayerSpec, Network, Tensor, adam_step, backward
from .nn import tensor as T


# -- data mismatch -----------------------------------------------------------------


def data_mismatch(d: np.ndarray, d_obs: np.ndarray, c_d: np.ndarray) -> float:
    """Covariance-normalized squared misfit, averaged over the data length."""
    d = np.asarray(d, dtype=np.float64)
    d_obs = np.asarray(d_obs, dtype=np.float64)
    if d.shape != d_obs.shape:
        raise ConfigError(f"data vectors differ in length: {d.shape} vs {d_obs.shape}")
    r = d - d_obs
    c_d = np.asarray(c_d, dtype=np.float64)
    if c_d.ndim == 1:
        if np.any(c_d <= 0):
            raise NumericalError("C_D is singular: zero variance channel")
        return float(np.sum(r * r / c_d) / r.size)
    sol = np.linalg.solve(c_d, r)
    return float(r @ sol / r.size)


def mean_data_mismatch(preds: np.ndarray, d_obs: np.ndarray, c_d: np.ndarray) -> float:
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    return float(np.mean([data_mismatch(p, d_obs, c_d) for p in preds]))


# -- classification accuracy ---------------------------------------------------------


def balanced_accuracy(predicted: np.ndarray, truth: np.ndarray,
                      classes: np.ndarray | list | None = None) -> float:
    """Mean per-class recall.  Classes absent from the truth are excluded."""
    predicted = np.asarray(predicted).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predicted.shape != truth.shape:
        raise ConfigError("predicted and true label fields differ in size")
    labels = np.unique(truth) if classes is None else np.asarray(classes)
    recalls = []
    for c in labels:
        mask = truth == c
        if not mask.any():
            continue
        recalls.append(float(np.mean(predicted[mask] == c)))
    if not recalls:
        raise ConfigError("no class present in the truth field")
    return float(np.mean(recalls))


# -- ensemble error metrics ------------------------------------------------------------


def rmse_ensemble(members: np.ndarray, m_true: np.ndarray) -> np.ndarray:
    """Per-member ||m_j - m_true||_2 / sqrt(M)."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    m_true = np.asarray(m_true, dtype=np.float64).reshape(-1)
    if members.shape[1] != m_true.size:
        raise ConfigError(f"member length {members.shape[1]} != truth length {m_true.size}")
    diffs = members - m_true[None, :]
    return np.linalg.norm(diffs, axis=1) / np.sqrt(m_true.size)


def spread(members: np.ndarray) -> float:
    """Mean member-to-ensemble-mean RMSE."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] < 2:
        raise ConfigError("spread needs at least 2 members")
    mean = members.mean(axis=0)
    return float(np.mean(np.linalg.norm(members - mean, axis=1)) / np.sqrt(members.shape[1]))


# -- Frechet distance --------------------------------------------------------------------


def frechet_from_moments(mu_r: np.ndarray, cov_r: np.ndarray,
                         mu_g: np.ndarray, cov_g: np.ndarray) -> float:
    """||mu_r - mu_g||^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2)).

    The cross term uses the symmetric similarity form C_r^(1/2) C_g C_r^(1/2);
    small negative eigenvalues from sampling noise are clipped at zero.
    """
    mu_r = np.atleast_1d(np.asarray(mu_r, dtype=np.float64))
    mu_g = np.atleast_1d(np.asarray(mu_g, dtype=np.float64))
    cov_r = np.atleast_2d(np.asarray(cov_r, dtype=np.float64))
    cov_g = np.atleast_2d(np.asarray(cov_g, dtype=np.float64))
    vals_r, vecs_r = np.linalg.eigh(0.5 * (cov_r + cov_r.T))
    root_r = vecs_r @ (np.sqrt(np.clip(vals_r, 0.0, None))[:, None] * vecs_r.T)
    inner = root_r @ (0.5 * (cov_g + cov_g.T)) @ root_r
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    d2 = float(np.sum((mu_r - mu_g) ** 2) + np.trace(cov_r) + np.trace(cov_g) - 2.0 * cross)
    return d2


def frechet_distance(features_r: np.ndarray, features_g: np.ndarray, warn=None) -> float:
    """Frechet distance between two feature clouds (rows are samples)."""
    fr = np.atleast_2d(np.asarray(features_r, dtype=np.float64))
    fg = np.atleast_2d(np.asarray(features_g, dtype=np.float64))
    if not (np.isfinite(fr).all() and np.isfinite(fg).all()):
        raise NumericalError("non-finite features")
    dim = fr.shape[1]
    if min(fr.shape[0], fg.shape[0]) < dim + 1 and warn is not None:
        warn(f"fewer than dim+1 = {dim + 1} samples per side; covariance is rank deficient")
    mu_r, mu_g = fr.mean(axis=0), fg.mean(axis=0)
    cov_r = np.cov(fr, rowvar=False).reshape(dim, dim)
    cov_g = np.cov(fg, rowvar=False).reshape(dim, dim)
    return frechet_from_moments(mu_r, cov_r, mu_g, cov_g)


# -- reservoir classifier ---------------------------------------------------------------


@dataclass
class FeatureModel:
    """Classifier over synthetic realizations; penultimate activations = features."""

    net: Network
    feature_layer: int
    n_classes: int
    bounds: tuple[float, float]

    def _prepare(self, fields: np.ndarray) -> np.ndarray:
        x = np.asarray(fields, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        return x[:, None, :, :]

    def features(self, normalized_fields: np.ndarray) -> np.ndarray:
        x = self._prepare(normalized_fields)
        taps: dict[int, Tensor] = {self.feature_layer: None}
        self.net.forward(Tensor(x), training=False, taps=taps)
        return taps[self.feature_layer].data.astype(np.float64)

    def logits(self, normalized_fields: np.ndarray) -> np.ndarray:
        x = self._prepare(normalized_fields)
        return self.net.forward(Tensor(x), training=False).data

    def predict(self, normalized_fields: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(normalized_fields), axis=1)

    @property
    def feature_dim(self) -> int:
        spec = self.net.layers[self.feature_layer]
        return spec.units


def classifier_specs(hw: tuple[int, int], n_classes: int, feature_width: int = 32) -> list[LayerSpec]:
    return [
        LayerSpec("conv2d", filters=8, kernel=3, stride=2, padding="same"),
        LayerSpec("activation", activation="leaky-relu", alpha=0.2),
        LayerSpec("conv2d", filters=16, kernel=3, stride=2, padding="same"),
        LayerSpec("activation", activation="leaky-relu", alpha=0.2),
        LayerSpec("conv2d", filters=32, kernel=3, stride=2, padding="same"),
        LayerSpec("activation", activation="leaky-relu", alpha=0.2),
        LayerSpec("flatten"),
        LayerSpec("dense", units=feature_width),
        LayerSpec("activation", activation="leaky-relu", alpha=0.2),
        LayerSpec("dense", units=n_classes),
    ]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross-entropy, stable via max subtraction (held constant)."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = T.sub(logits, shift)
    log_norm = T.log(T.tsum(T.exp(z), axis=1, keepdims=True))
    log_probs = T.sub(z, log_norm)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = T.tsum(T.mul(log_probs, Tensor(onehot)), axis=1)
    return T.neg(T.tmean(picked))


def train_reservoir_classifier(dataset: Dataset, epochs: int = 12, batch: int = 64,
                               lr: float = 1e-3, seed: int = 0,
                               feature_width: int = 32,
                               val_fraction: float = 0.2) -> tuple[FeatureModel, dict]:
    """Train the feature classifier on a labeled dataset.

    Raises if training fails to beat the majority-class baseline on held-out
    samples (a diverged classifier would poison every Frechet comparison).
    """
    if dataset.labels is None:
        raise ConfigError("classifier training needs a labeled dataset")
    n_classes = int(dataset.labels.max()) + 1
    x_all = dataset.normalized()[:, None, :, :]
    y_all = dataset.labels.astype(np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y_all))
    x_all, y_all = x_all[order], y_all[order]
    n_val = max(1, int(val_fraction * len(y_all)))
    x_val, y_val = x_all[:n_val], y_all[:n_val]
    x_tr, y_tr = x_all[n_val:], y_all[n_val:]

    net = Network((1,) + dataset.grid.shape, classifier_specs(dataset.grid.shape, n_classes, feature_width), seed=seed)
    feature_layer = len(net.layers) - 3   # activations after the penultimate dense
    opt = AdamState(lr=lr)
    steps = max(1, len(y_tr) // batch)
    for epoch in range(epochs):
        perm = rng.permutation(len(y_tr))
        for s in range(steps):
            sel = perm[s * batch : (s + 1) * batch]
            net.zero_grad()
            logits = net.forward(Tensor(x_tr[sel]), training=True, rng=rng)
            loss = cross_entropy(logits, y_tr[sel])
            if not np.isfinite(loss.data):
                raise NumericalError(f"classifier loss diverged at epoch {epoch}")
            backward(loss)
            adam_step(opt, net.params)

    model = FeatureModel(net=net, feature_layer=feature_layer, n_classes=n_classes, bounds=dataset.bounds)
    pred = model.predict(x_val[:, 0])
    accuracy = float(np.mean(pred == y_val))
    majority = float(np.bincount(y_tr, minlength=n_classes).max() / len(y_tr))
    info = {"val_accuracy": accuracy, "majority_baseline": majority, "n_classes": n_classes}
    if accuracy <= majority:
        raise NumericalError(f"classifier failed to learn: accuracy {accuracy:.3f} <= baseline {majority:.3f}")
    return model, info


# -- static geostatistical suite -----------------------------------------------------------


def _check_sets(set_a: np.ndarray, set_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3:
        raise ConfigError("realization sets must be (N, ny, nx)")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ConfigError("empty realization set")
    if a.shape[1:] != b.shape[1:]:
        raise ConfigError(f"grids differ: {a.shape[1:]} vs {b.shape[1:]}")
    return a, b


def semivariogram(fields: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """Mean experimental semivariogram over axis-aligned lags, pooled x/y."""
    fields = np.asarray(fields, dtype=np.float64)
    gamma = np.zeros(len(lags))
    for li, h in enumerate(lags):
        dx = fields[:, :, h:] - fields[:, :, :-h]
        dy = fields[:, h:, :] - fields[:, :-h, :]
        gamma[li] = 0.25 * (np.mean(dx**2) + np.mean(dy**2))
    return gamma


def variogram_mse(set_a: np.ndarray, set_b: np.ndarray, lags: np.ndarray | None = None) -> float:
    a, b = _check_sets(set_a, set_b)
    if lags is None:
        lags = np.arange(1, a.shape[1] // 2 + 1)
    ga = semivariogram(a, lags)
    gb = semivariogram(b, lags)
    return float(np.mean((ga - gb) ** 2))


def connectivity_curve(fields: np.ndarray, lags: np.ndarray, threshold: float) -> np.ndarray:
    """P(two body cells at lag h share a connected component), pooled x/y.

    The body is the thresholded upper set; components use 4-neighbour labeling.
    """
    fields = np.asarray(fields, dtype=np.float64)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    tau = np.zeros(len(lags))
    counts = np.zeros(len(lags))
    for f in fields:
        body = f >= threshold
        labels, _ = ndi.label(body, structure=structure)
        for li, h in enumerate(lags):
            for la, lb in ((labels[:, h:], labels[:, :-h]), (labels[h:, :], labels[:-h, :])):
                both = (la > 0) & (lb > 0)
                n = both.sum()
                if n:
                    tau[li] += float(np.count_nonzero((la == lb) & both))
                    counts[li] += n
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(counts > 0, tau / np.maximum(counts, 1), 0.0)
    return out


def connectivity_mse(set_a: np.ndarray, set_b: np.ndarray, lags: np.ndarray | None = None) -> float:
    a, b = _check_sets(set_a, set_b)
    if lags is None:
        lags = np.arange(1, a.shape[1] // 2 + 1)
    threshold = float(np.median(a))     # reference set fixes the body threshold
    ca = connectivity_curve(a, lags, threshold)
    cb = connectivity_curve(b, lags, threshold)
    return float(np.mean((ca - cb) ** 2))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for two discrete distributions (no smoothing applied here)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise NumericalError("KL undefined: q vanishes where p > 0")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def histogram_kl(set_a: np.ndarray, set_b: np.ndarray, bins: int = 50,
                 smoothing: float = 1e-10) -> float:
    """KL between value histograms on shared bins with additive smoothing."""
    a, b = _check_sets(set_a, set_b)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        hi = lo + 1.0
    pa, _ = np.histogram(a, bins=bins, range=(lo, hi))
    pb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = (pa + smoothing) / (pa.sum() + bins * smoothing)
    q = (pb + smoothing) / (pb.sum() + bins * smoothing)
    return kl_divergence(p, q)


def pca_correlation(set_a: np.ndarray, set_b: np.ndarray, k: int = 20) -> float:
    """Correlation of the two sets' top-k PCA explained-variance spectra."""
    a, b = _check_sets(set_a, set_b)

    def spectrum(x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        flat = flat - flat.mean(axis=0)
        s = np.linalg.svd(flat, compute_uv=False)
        var = s**2
        kk = min(k, var.size)
        out = np.zeros(k)
        out[:kk] = (var / var.sum())[:kk]
        return out

    sa = spectrum(a)
    sb = spectrum(b)
    if np.allclose(sa, sa.mean()) or np.allclose(sb, sb.mean()):
        return 1.0 if np.allclose(sa, sb) else 0.0
    return float(np.corrcoef(sa, sb)[0, 1])


def mds_mmd(set_a: np.ndarray, set_b: np.ndarray, seed: int = 0) -> float:
    """Biased MMD^2 with an RBF kernel on a joint classical-MDS 2-D embedding.

    The bandwidth follows the median heuristic on the embedded points; the
    biased estimator is zero exactly when the two sets coincide.
    """
    a, b = _check_sets(set_a, set_b)
    xa = a.reshape(a.shape[0], -1)
    xb = b.reshape(b.shape[0], -1)
    x = np.vstack([xa, xb])
    n = x.shape[0]
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
    j = np.eye(n) - np.ones((n, n)) / n
    g = -0.5 * j @ d2 @ j
    vals, vecs = np.linalg.eigh(0.5 * (g + g.T))
    top = np.argsort(vals)[::-1][:2]
    emb = vecs[:, top] * np.sqrt(np.clip(vals[top], 0.0, None))[None, :]
    ea, eb = emb[: xa.shape[0]], emb[xa.shape[0] :]
    dd = np.sum((emb[:, None, :] - emb[None, :, :]) ** 2, axis=2)
    pos = dd[dd > 0]
    bw = np.sqrt(0.5 * np.median(pos)) if pos.size else 1.0
    gamma = 1.0 / (2.0 * bw**2)

    def kmean(u, v):
        d = np.sum((u[:, None, :] - v[None, :, :]) ** 2, axis=2)
        return float(np.mean(np.exp(-gamma * d)))

    return kmean(ea, ea) + kmean(eb, eb) - 2.0 * kmean(ea, eb)


@dataclass
class GeoStatsReport:
    variogram_mse: float
    connectivity_mse: float
    histogram_kl: float
    pca_correlation: float
    mds_mmd: float

    def as_dict(self) -> dict:
        return {
            "variogram_mse": self.variogram_mse,
            "connectivity_mse": self.connectivity_mse,
            "histogram_kl": self.histogram_kl,
            "pca_correlation": self.pca_correlation,
            "mds_mmd": self.mds_mmd,
        }


def geostats_report(set_a: np.ndarray, set_b: np.ndarray, bins: int = 50,
                    k: int = 20) -> GeoStatsReport:
    a, b = _check_sets(set_a, set_b)
    lags = np.arange(1, a.shape[1] // 2 + 1)
    return GeoStatsReport(
        variogram_mse=variogram_mse(a, b, lags),
        connectivity_mse=connectivity_mse(a, b, lags),
        histogram_kl=histogram_kl(a, b, bins=bins),
        pca_correlation=pca_correlation(a, b, k=k),
        mds_mmd=mds_mmd(a, b),
    )
