"""scikit-learn style front end for distributed SAR estimation."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cluster import INFER_MODES, METHODS, run_pipeline
from .exceptions import ConfigurationError, DimensionError
from .harness import fit_global
from .inference import confidence_intervals, summary_rows
from .lse import SolverOptions
from .network import Dataset, SparseNetwork, partition_uniform, row_normalize

__all__ = ["DistributedSAR"]


class DistributedSAR(RegressorMixin, BaseEstimator):
    """Spatial autoregression ``y = rho W y + X beta + e`` fitted across simulated workers.

    Parameters
    ----------
    method : {'os', 'wlse', 'twlse', 'global'}, default='twlse'
        Aggregation rule.  ``'global'`` fits the whole network as one shard.
    n_workers : int, default=10
        Number of shards ``K``; nodes are split uniformly at random.
    infer : {'none', 'exact', 'projected'}, default='projected'
        Covariance estimation mode (ignored for ``'os'`` and ``'global'``).
    proj_dim : int or None, default=None
        Projection dimension; ``None`` means ``floor(log N) + 1``.
    proj_seed : int, default=0
    proj_sparse : bool or None, default=None
        Sparse sign projections; ``None`` switches them on for ``N >= 1e5``.
    max_iter, grad_tol : solver controls for the local Newton fits.
    n_jobs : int, default=1
        Threads used to run workers.
    random_state : int or None, default=None
        Seed of the node partition.

    Attributes
    ----------
    theta_ : ndarray of shape (p + 1,)
        ``(rho, beta_1, ..., beta_p)``.
    rho_ : float
    coef_ : ndarray of shape (p,)
    covariance_ : ndarray or None
    bse_ : ndarray or None
        Standard errors from ``covariance_``.
    messages_ : list of Message
    network_ : SparseNetwork
    """

    def __init__(self, method="twlse", n_workers=10, infer="projected", proj_dim=None, proj_seed=0,
                 proj_sparse=None, max_iter=100, grad_tol=1e-8, n_jobs=1, random_state=None):
        self.method = method
        self.n_workers = n_workers
        self.infer = infer
        self.proj_dim = proj_dim
        self.proj_seed = proj_seed
        self.proj_sparse = proj_sparse
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _network(self, network, n):
        if network is None:
            raise ValueError("fit requires network= (adjacency matrix or SparseNetwork)")
        net = network if isinstance(network, SparseNetwork) else row_normalize(sp.csr_matrix(network))
        if net.n_nodes != n:
            raise DimensionError(f"network has {net.n_nodes} nodes but X has {n} rows")
        return net

    def fit(self, X, y, network=None):
        """Fit on covariates ``X`` (N x p), responses ``y`` and a network over the same N nodes."""
        X, y = check_X_y(X, y, y_numeric=True)
        if self.method not in METHODS + ("global",):
            raise ConfigurationError(f"method must be one of {METHODS + ('global',)}")
        if self.infer not in INFER_MODES:
            raise ConfigurationError(f"infer must be one of {INFER_MODES}")
        net = self._network(network, X.shape[0])
        ds = Dataset(net, X, y)
        solver = SolverOptions(max_iter=self.max_iter, grad_tol=self.grad_tol)
        self.covariance_ = None
        self.messages_ = []
        if self.method == "global":
            est = fit_global(ds, solver)
        else:
            part = partition_uniform(ds.n_nodes, self.n_workers, seed=self.random_state)
            sparse = self.proj_sparse if self.proj_sparse is not None else ds.n_nodes >= 100_000
            res = run_pipeline(
                ds, part, self.method,
                infer=self.infer if self.method != "os" else "none",
                proj_dim=self.proj_dim, proj_seed=self.proj_seed, proj_sparse=sparse,
                solver=solver, n_jobs=self.n_jobs,
            )
            est = res.estimate
            self.messages_ = res.messages
            if res.covariance is not None:
                self.covariance_ = res.covariance.covariance
        self.theta_ = np.asarray(est.theta)
        self.rho_ = float(self.theta_[0])
        self.coef_ = self.theta_[1:].copy()
        self.bse_ = None if self.covariance_ is None else np.sqrt(np.diag(self.covariance_))
        self.rounds_used_ = est.rounds_used
        self.total_bytes_ = est.total_bytes
        self.network_ = net
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, network=None):
        """Equilibrium mean ``(I - rho W)^{-1} X beta`` on the fitted (or a given) network."""
        check_is_fitted(self, "theta_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        net = self.network_ if network is None else self._network(network, X.shape[0])
        if net.n_nodes != X.shape[0]:
            raise DimensionError("X rows must match the network's nodes")
        s = sp.identity(net.n_nodes, format="csc") - self.rho_ * net.weights.tocsc()
        return spsolve(s, X @ self.coef_)

    def conf_int(self, level=0.95):
        check_is_fitted(self, "theta_")
        if self.covariance_ is None:
            raise ValueError("no covariance available; refit with infer='exact' or 'projected'")
        return np.column_stack(confidence_intervals(self.theta_, self.covariance_, level))

    def summary(self, level=0.95):
        check_is_fitted(self, "theta_")
        if self.covariance_ is None:
            raise ValueError("no covariance available; refit with infer='exact' or 'projected'")
        return summary_rows(self.theta_, self.covariance_, level=level)
