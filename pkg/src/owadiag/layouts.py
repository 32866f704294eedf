"""The three lightweight layouts used for diagnosis: Model7, Model3 and LeNet-5.

Inputs are single-channel images of shape (variables, window).  Pool windows
are (height over variables) x (width over time), so ``2x1`` halves only the
variable axis.
"""

from __future__ import annotations

from dataclasses import dataclass

from .nn import LayerSpec, Network
from .quantifiers import Quantifier

LAYOUT_NAMES = ("model7", "model3", "lenet5")

# (kind, arg) stages; ReLU follows each Conv and every hidden FC, Flatten precedes the first FC
_STAGES = {
    "model7": [("conv", 64), ("conv", 64), ("pool", (2, 2)), ("conv", 128), ("pool", (2, 1)), ("fc", 300)],
    "model3": [("conv", 128), ("conv", 128), ("conv", 128), ("pool", (2, 1)), ("fc", 300)],
    "lenet5": [("conv", 6), ("pool", (2, 2)), ("conv", 16), ("pool", (2, 2)), ("fc", 120), ("fc", 84)],
}

KERNEL = (3, 3)


@dataclass(frozen=True)
class ModelLayout:
    name: str
    quantifier: Quantifier
    layers: tuple[LayerSpec, ...]
    variables: int
    window: int
    classes: int

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (1, self.variables, self.window)

    @property
    def stages(self) -> list[str]:
        """Compact stage names, e.g. ``['Conv(64)', ..., 'FC(6)']``."""
        out = []
        for s in self.layers:
            if s.kind == "Conv2D":
                out.append(f"Conv({s.out_channels})")
            elif s.kind == "OwaPool":
                out.append(f"Pool{s.quantifier.label}({s.window[0]}x{s.window[1]})")
            elif s.kind == "Dense":
                out.append(f"FC({s.units})")
        return out

    def build(self, seed: int = 0) -> Network:
        return Network(self.layers, self.input_shape, seed=seed)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "quantifier": self.quantifier.kind.value,
            "alpha": self.quantifier.alpha,
            "variables": self.variables,
            "window": self.window,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelLayout":
        return build_layout(d["name"], Quantifier(d["quantifier"], d["alpha"]),
                            d["variables"], d["window"], d["classes"])


def build_layout(name: str, q: Quantifier, variables: int, window: int, classes: int) -> ModelLayout:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in _STAGES:
        raise ValueError(f"unknown layout {name!r}; expected one of {LAYOUT_NAMES}")
    if variables < 1 or window < 1:
        raise ValueError("variables and window must be >= 1")
    if classes < 1:
        raise ValueError("classes must be >= 1")
    h, w = variables, window
    layers: list[LayerSpec] = []
    flat = False
    for i, (kind, arg) in enumerate(_STAGES[key], start=1):
        if kind == "conv":
            layers += [LayerSpec("Conv2D", out_channels=arg, kernel=KERNEL), LayerSpec("ReLU")]
        elif kind == "pool":
            ph, pw = arg
            if h // ph < 1 or w // pw < 1:
                raise ValueError(
                    f"{key}: input {variables}x{window} collapses at stage {i} "
                    f"(pool {ph}x{pw} on {h}x{w})"
                )
            h, w = h // ph, w // pw
            layers.append(LayerSpec("OwaPool", window=arg, quantifier=q))
        else:
            if not flat:
                layers.append(LayerSpec("Flatten"))
                flat = True
            layers += [LayerSpec("Dense", units=arg), LayerSpec("ReLU")]
    if not flat:
        layers.append(LayerSpec("Flatten"))
    layers.append(LayerSpec("Dense", units=classes))
    return ModelLayout(key, q, tuple(layers), variables, window, classes)


def parameter_count(layout) -> int:
    """Trainable scalars (kernels, dense weights, biases) of a layout or layer list."""
    if isinstance(layout, ModelLayout):
        specs, shape = layout.layers, layout.input_shape
    else:
        specs, shape = layout
    total = 0
    c, h, w = shape if len(shape) == 3 else (None, None, None)
    flat = None if len(shape) == 3 else shape[0]
    for s in specs:
        if s.kind == "Conv2D":
            kh, kw = s.kernel
            total += s.out_channels * c * kh * kw + s.out_channels
            if s.padding == "same":
                h, w = -(-h // s.stride), -(-w // s.stride)
            else:
                h, w = (h - kh) // s.stride + 1, (w - kw) // s.stride + 1
            c = s.out_channels
        elif s.kind == "OwaPool":
            h, w = h // s.window[0], w // s.window[1]
        elif s.kind == "Flatten":
            flat = c * h * w
        elif s.kind == "Dense":
            total += flat * s.units + s.units
            flat = s.units
    return total
