"""Feature-embedding and plotting support for run inspection.

The 2-D embedding of pooled low-level features uses a deterministic PCA
projection (fit on the union of the point sets, component signs fixed), so
repeated invocations produce identical plots and distances. A stochastic
neighbor embedding is available as a seeded opt-in alternative.
"""

import numpy as np
import torch

from .trainer import to_image_tensor


def pooled_low_features(network, samples, batch_size=16):
    """Spatially pooled F_l before and after refinement, (N, 24) each.

    Without a refiner the two sets coincide (refinement is the identity).
    """
    network.eval()
    pre = []
    post = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            x = torch.stack([to_image_tensor(s) for s in chunk])
            out = network.forward_pass(x, sample_latent=False, want_recon=False)
            pre.append(out.bundle.f_l.mean(dim=(2, 3)).numpy())
            post.append(out.bundle.f_r.mean(dim=(2, 3)).numpy())
    return np.concatenate(pre), np.concatenate(post)


def pca_projection(points, k=2):
    """Deterministic top-k PCA basis: largest-|loading| entry made positive."""
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:k]
    for row in basis:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return basis.T  # (dim, k)


def project_2d(points, basis):
    pts = np.asarray(points, dtype=np.float64)
    return pts @ basis


def centroid_distance(points_a, points_b):
    ca = np.asarray(points_a, dtype=np.float64).mean(axis=0)
    cb = np.asarray(points_b, dtype=np.float64).mean(axis=0)
    return float(np.linalg.norm(ca - cb))


def embedding_report(network, source_samples, target_samples, batch_size=16):
    """Project pooled F_l (pre/post refinement) of both domains into a shared
    2-D PCA space; report the inter-domain centroid distances.

    Returns a dict with the projected point sets and both distances.
    """
    n_s = len(source_samples)
    pre_s, post_s = pooled_low_features(network, source_samples, batch_size)
    pre_t, post_t = pooled_low_features(network, target_samples, batch_size)
    basis = pca_projection(np.concatenate([pre_s, pre_t, post_s, post_t]))
    proj = {
        "pre_source": project_2d(pre_s, basis),
        "pre_target": project_2d(pre_t, basis),
        "post_source": project_2d(post_s, basis),
        "post_target": project_2d(post_t, basis),
    }
    return {
        **proj,
        "n_source": n_s,
        "distance_pre": centroid_distance(proj["pre_source"], proj["pre_target"]),
        "distance_post": centroid_distance(proj["post_source"], proj["post_target"]),
    }


def tsne_embedding(points, rng_seed=0, perplexity=20.0, iters=300):
    """Small seeded stochastic-neighbor embedding (opt-in alternative to PCA)."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    perplexity = min(perplexity, max(2.0, (n - 1) / 3.0))
    d2 = np.sum((pts[:, None] - pts[None, :]) ** 2, axis=-1)
    p = np.zeros_like(d2)
    for i in range(n):
        sigma = np.sqrt(np.median(d2[i][d2[i] > 0]) + 1e-12) / 2.0
        row = np.exp(-d2[i] / (2 * sigma**2))
        row[i] = 0
        p[i] = row / (row.sum() + 1e-12)
    p = (p + p.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    rng = np.random.default_rng(rng_seed)
    y = rng.normal(scale=1e-2, size=(n, 2))
    lr = 50.0
    for _ in range(iters):
        dy2 = np.sum((y[:, None] - y[None, :]) ** 2, axis=-1)
        q_num = 1.0 / (1.0 + dy2)
        np.fill_diagonal(q_num, 0.0)
        q = np.maximum(q_num / q_num.sum(), 1e-12)
        pq = (p - q) * q_num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        y -= lr * grad
    return y


def plot_embedding(report, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5), sharex=False, sharey=False)
    for ax, stage in zip(axes, ("pre", "post")):
        ax.scatter(*report[f"{stage}_source"].T, s=12, c="tab:red", label="source")
        ax.scatter(*report[f"{stage}_target"].T, s=12, c="tab:blue", label="target")
        dist = report[f"distance_{stage}"]
        title = "before refinement" if stage == "pre" else "after refinement"
        ax.set_title(f"{title} (centroid dist {dist:.3f})")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_dice_boxplot(run_labels, per_image_tables, path):
    """Boxplot of per-image Dice, grouped per class, one box per run."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5), sharey=True)
    for ax, key, title in zip(axes, ("dice_disc", "dice_cup"), ("disc", "cup")):
        data = [[row[key] for row in table] for table in per_image_tables]
        ax.boxplot(data, tick_labels=run_labels)
        ax.set_title(f"per-image Dice ({title})")
        ax.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
