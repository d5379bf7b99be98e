"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools

import numpy as np

from objlayers.compositor import LayerImage, LayerStack


def frontmost_lookup(stack: LayerStack) -> np.ndarray:
    """Per pixel, the color of the nearest layer whose alpha is 1 (black if none)."""
    h, w = stack.shape
    out = np.zeros((h, w, 3))
    for r in range(h):
        for c in range(w):
            for layer in reversed(stack.layers):
                if layer.alpha[r, c] == 1.0:
                    out[r, c] = layer.color[r, c]
                    break
    return out


def frontmost_labels(alphas: np.ndarray) -> np.ndarray:
    n, h, w = alphas.shape
    out = np.zeros((h, w), dtype=int)
    for r in range(h):
        for c in range(w):
            for i in range(n - 1, 0, -1):
                if alphas[i, r, c] >= 0.5:
                    out[r, c] = i + 1
                    break
    return out


def brute_force_assignment(cost: np.ndarray) -> float:
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def random_binary_stack(rng: np.random.Generator, n: int, h: int, w: int, p: float = 0.3) -> LayerStack:
    colors = rng.uniform(0, 1, size=(n, h, w, 3))
    alphas = (rng.uniform(size=(n, h, w)) < p).astype(float)
    alphas[0] = 1.0
    return LayerStack.from_arrays(colors, alphas)


def rect_alpha(h: int, w: int, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    a = np.zeros((h, w))
    a[r0:r1, c0:c1] = 1.0
    return a


def rect_stack(h: int, w: int, rects, colors, bg=0.2) -> LayerStack:
    """Background plus one flat-colored rectangle layer per (r0, r1, c0, c1)."""
    layers = [LayerImage(np.full((h, w, 3), bg), np.ones((h, w)))]
    for rect, color in zip(rects, colors):
        a = rect_alpha(h, w, *rect)
        layers.append(LayerImage(np.asarray(color) * a[..., None] + 0.5 * (1 - a[..., None]), a))
    return LayerStack(tuple(layers))


def composite_loss_reference(colors: np.ndarray, alphas: np.ndarray, image: np.ndarray, delta: float) -> float:
    """Pixel-by-pixel loop over the compositing recursion; colors (N, H, W, 3), image (H, W, 3)."""
    n, h, w, _ = colors.shape
    total = 0.0
    for r in range(h):
        for c in range(w):
            acc = np.zeros(3)
            cover = 0.0
            for i in range(n):
                m = alphas[i, r, c]
                new = cover * (1 - m) + m
                acc = (colors[i, r, c] * m + cover * (1 - m) * acc) / (new + delta)
                cover = new
            total += float(((image[r, c] - acc) ** 2).sum())
    return total / (h * w * 3)
