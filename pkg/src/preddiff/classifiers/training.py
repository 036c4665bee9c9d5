"""Training for the built-in models."""

from __future__ import annotations

import logging

import numpy as np
from scipy.optimize import minimize

from .base import TrainingError
from .network import Affine, Network, Softmax, build_network

log = logging.getLogger(__name__)


def _check_labels(labels, n, num_classes=None):
    labels = np.asarray(labels)
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"need {n} integer labels")
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    if len(np.unique(labels)) < 2:
        raise ValueError("training data must contain at least two classes")
    return labels.astype(np.int64), max(k, 2)


def logreg_step_size(features: np.ndarray, l2: float) -> float:
    """1/L for the softmax cross-entropy objective on ``features``.

    The Hessian is bounded by ``0.5 * X'X/n + l2`` (bias column included), so
    this step never increases the loss.
    """
    n = len(features)
    aug = np.hstack([features.reshape(n, -1), np.ones((n, 1))])
    top = np.linalg.norm(aug, 2) ** 2 / n
    return 1.0 / (0.5 * top + l2)


def train_logreg(images, labels, l2: float = 1e-3, epochs: int = 500, lr: float | None = None,
                 seed: int = 0, num_classes: int | None = None, solver: str | None = None) -> Network:
    """Multinomial L2-regularised logistic regression.

    ``solver="lbfgs"`` (the default unless ``lr`` is given) runs scipy's
    L-BFGS-B for at most ``epochs`` iterations. ``solver="gd"`` runs
    full-batch gradient descent with step ``lr``, by default
    :func:`logreg_step_size`, which never increases the loss.

    The bias is not penalised, so fitting on mean-centred inputs and folding
    the centring into the bias afterwards optimises the same objective; it
    only removes the large common-offset eigenvalue that slows both solvers.
    The per-iteration loss history is stored in ``training["loss_history"]``.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    labels, k = _check_labels(labels, n, num_classes)
    solver = solver or ("gd" if lr is not None else "lbfgs")
    if solver not in ("gd", "lbfgs"):
        raise ValueError(f"unknown solver {solver!r}")
    d = int(np.prod(images.shape[1:]))
    centre = images.mean(axis=0)
    centred = images - centre
    net = Network(images.shape[1:], [Affine("affine1", np.zeros((d, k)), np.zeros(k)), Softmax("softmax")],
                  training_size=n)
    if solver == "gd":
        if lr is None:
            lr = logreg_step_size(centred, l2)
        history = _descend(net, centred, labels, l2, epochs, lr, optimizer="gd", seed=seed)
    else:
        history = _lbfgs(net, centred, labels, l2, epochs)
    affine = net.layers[0]
    affine.params["b"] = affine.params["b"] - centre.reshape(-1) @ affine.params["W"]
    net.training = {
        "model": "logreg", "solver": solver, "l2": l2, "epochs": epochs, "lr": lr, "seed": seed,
        "loss_history": history,
    }
    return net


def _lbfgs(net: Network, images, labels, l2, max_iter):
    """Minimise the training loss of ``net`` in place with L-BFGS-B."""
    params = net.parameters()

    def assign(theta):
        i = 0
        for _, p in params:
            p[...] = theta[i : i + p.size].reshape(p.shape)
            i += p.size

    def objective(theta):
        assign(theta)
        loss, grads = net.loss_and_grads(images, labels, l2)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became {loss} during L-BFGS")
        return loss, np.concatenate([grads[key].ravel() for key, _ in params])

    theta = np.concatenate([p.ravel() for _, p in params])
    history = [objective(theta)[0]]
    if max_iter == 0:
        return history
    result = minimize(objective, theta, jac=True, method="L-BFGS-B",
                      callback=lambda xk: history.append(objective(xk)[0]),
                      options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-8})
    assign(result.x)
    log.debug("L-BFGS stopped after %d iterations: %s", result.nit, result.message)
    return history


def train_small_net(skeleton: list[dict], images, labels, epochs: int = 300, lr: float = 0.01,
                    l2: float = 0.0, seed: int = 0, num_classes: int | None = None,
                    batch_size: int | None = None) -> Network:
    """Train a :func:`build_network` skeleton with Adam on cross-entropy.

    ``batch_size=None`` means full-batch. Zero epochs return the seeded
    initialisation.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    labels, k = _check_labels(labels, n, num_classes)
    net = build_network(images.shape[1:], skeleton, k, seed)
    net.training_size = n
    history = _descend(net, images, labels, l2, epochs, lr, optimizer="adam", seed=seed, batch_size=batch_size)
    net.training = {
        "model": "net", "skeleton": list(skeleton), "l2": l2, "epochs": epochs, "lr": lr,
        "seed": seed, "batch_size": batch_size, "loss_history": history,
    }
    return net


def _descend(net: Network, images, labels, l2, epochs, lr, optimizer, seed, batch_size=None):
    """Update ``net`` in place; return the full-data loss history.

    Full-batch runs record the loss before every update plus the final loss.
    """
    params = net.parameters()
    moments = [(np.zeros_like(p), np.zeros_like(p)) for _, p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(seed)
    n = len(images)
    full = batch_size is None or batch_size >= n
    history = []
    step = 0

    def update(grads):
        nonlocal step
        step += 1
        for (key, p), (m, v) in zip(params, moments):
            g = grads[key]
            if optimizer == "gd":
                p -= lr * g
                continue
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p -= lr * (m / (1 - beta1**step)) / (np.sqrt(v / (1 - beta2**step)) + eps)

    def checked(loss, epoch):
        if not np.isfinite(loss):
            raise TrainingError(f"loss became {loss} at epoch {epoch} (lr={lr})")
        return loss

    for epoch in range(epochs):
        if full:
            loss, grads = net.loss_and_grads(images, labels, l2)
            history.append(checked(loss, epoch))
            update(grads)
        else:
            order = rng.permutation(n)
            for i in range(0, n, batch_size):
                idx = order[i : i + batch_size]
                loss, grads = net.loss_and_grads(images[idx], labels[idx], l2)
                checked(loss, epoch)
                update(grads)
            history.append(checked(net.loss_and_grads(images, labels, l2)[0], epoch))
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.6f", epoch, history[-1])
    if full and epochs:
        history.append(checked(net.loss_and_grads(images, labels, l2)[0], epochs))
    return history


def accuracy(net: Network, images, labels) -> float:
    probs = net.predict_proba(images)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))
