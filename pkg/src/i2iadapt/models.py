"""Builders for the six-network bundle: encoders, decoders, classifier, critics.

The digit-scale networks follow the fixed recipe (four stride-2 4x4 conv
layers up and down, batchnorm + ReLU, final Tanh) with both encoders fully
tied and the first two decoder layers tied.  A width multiplier scales the
same topology down for desk-scale experiments, and an ``mlp`` variant runs
the whole bundle on flat 2-d point clouds for fast end-to-end tests.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ShapeError, Tensor
from .layers import Layer, LayerSpec, Network, ParamStore

ENCODER_PREFIXES = ("f_x.", "f_y.")

# image critics default to no normalization so the gradient-penalty
# double-backprop contract holds exactly; instance mode re-enables the
# normalization described for the image discriminators but then forbids
# the Wasserstein penalty
CRITIC_NORMS = ("none", "instance")


def _conv(name, cin, cout, norm="batch", act="relu", slope=0.2):
    return Layer(name, LayerSpec("conv", cin, cout, kernel=4, stride=2, pad=1, norm=norm, act=act, slope=slope))


def _convt(name, cin, cout, norm="batch", act="relu"):
    return Layer(name, LayerSpec("conv_t", cin, cout, kernel=4, stride=2, pad=1, norm=norm, act=act))


def _dense(name, cin, cout, act="none", slope=0.2):
    return Layer(name, LayerSpec("dense", cin, cout, act=act, slope=slope))


def build_digit_encoder(name: str, width: int = 64, in_ch: int = 1) -> Network:
    """1 x 32 x 32 input -> (2*width) x 2 x 2 latent."""
    w = width
    chans = [(in_ch, w), (w, w), (w, 2 * w), (2 * w, 2 * w)]
    return Network(name, [_conv(f"{name}.{i}", a, b) for i, (a, b) in enumerate(chans)])


def build_digit_decoder(name: str, width: int = 64, out_ch: int = 1,
                        mults: tuple = (8, 4, 2)) -> Network:
    """(2*width) x 2 x 2 latent -> out_ch x 32 x 32 in (-1, 1).

    ``mults`` scales the three hidden widths; the default reproduces the
    digit recipe (512, 256, 128 at width 64), the desk-scale bundle slims
    the ladder to keep the middle layers affordable.
    """
    w = width
    a, b, c = (m * w for m in mults)
    layers = [
        _convt(f"{name}.0", 2 * w, a),
        _convt(f"{name}.1", a, b),
        _convt(f"{name}.2", b, c),
        Layer(f"{name}.3", LayerSpec("conv_t", c, out_ch, kernel=4, stride=2, pad=1, norm="none", act="tanh")),
    ]
    return Network(name, layers)


def build_classifier_head(name: str, latent_features: int, num_classes: int) -> Network:
    return Network(name, ["flatten", _dense(f"{name}.0", latent_features, num_classes)])


def build_feature_discriminator(name: str, latent_features: int, hidden: int = 500) -> Network:
    return Network(name, [
        "flatten",
        _dense(f"{name}.0", latent_features, hidden, act="leaky_relu"),
        _dense(f"{name}.1", hidden, hidden, act="leaky_relu"),
        _dense(f"{name}.2", hidden, 1),
    ])


def build_image_critic(name: str, width: int = 64, in_ch: int = 1, norm: str = "none") -> Network:
    if norm not in CRITIC_NORMS:
        raise ValueError(f"critic norm must be one of {CRITIC_NORMS}, got {norm!r}")
    w = width
    layers = [
        _conv(f"{name}.0", in_ch, w, norm=norm, act="leaky_relu"),
        _conv(f"{name}.1", w, 2 * w, norm=norm, act="leaky_relu"),
        _conv(f"{name}.2", 2 * w, 4 * w, norm=norm, act="leaky_relu"),
        _conv(f"{name}.3", 4 * w, 1, norm="none", act="none"),
        "global_avg_pool",
    ]
    return Network(name, layers)


def _build_mlp_nets(num_classes: int, latent: int = 16):
    hidden = 32
    f = lambda name: Network(name, [
        "flatten",
        _dense(f"{name}.0", 2, hidden, act="leaky_relu"),
        _dense(f"{name}.1", hidden, latent, act="leaky_relu"),
    ])
    g = lambda name: Network(name, [
        _dense(f"{name}.0", latent, hidden, act="leaky_relu"),
        _dense(f"{name}.1", hidden, 2, act="tanh"),
    ])
    d = lambda name: Network(name, [
        "flatten",
        _dense(f"{name}.0", 2, hidden, act="leaky_relu"),
        _dense(f"{name}.1", hidden, hidden, act="leaky_relu"),
        _dense(f"{name}.2", hidden, 1),
    ])
    nets = {
        "f_x": f("f_x"), "f_y": f("f_y"),
        "g_x": g("g_x"), "g_y": g("g_y"),
        "h": build_classifier_head("h", latent, num_classes),
        "d_x": d("d_x"), "d_y": d("d_y"),
        "d_z": build_feature_discriminator("d_z", latent, hidden=64),
    }
    return nets, latent


ARCH_WIDTHS = {"digits": 64, "small": 8}


@dataclass
class ModelBundle:
    """The six networks plus their shared parameter store."""

    store: ParamStore
    nets: dict
    arch: str
    num_classes: int
    latent_features: int
    critic_norm: str
    encoders_tied: bool
    input_shape: tuple

    # -- forward helpers -----------------------------------------------------
    # update_stats=False runs batch normalization on batch statistics without
    # touching the running estimates; shadow passes over generated images use
    # it so evaluation-time statistics only ever track real data

    def encode_source(self, x: Tensor, train: bool = True, update_stats: bool = True) -> Tensor:
        return self.nets["f_x"](self.store, x, train, update_stats)

    def encode_target(self, y: Tensor, train: bool = True, update_stats: bool = True) -> Tensor:
        return self.nets["f_y"](self.store, y, train, update_stats)

    def decode_source(self, z: Tensor, train: bool = True, update_stats: bool = True) -> Tensor:
        return self.nets["g_x"](self.store, z, train, update_stats)

    def decode_target(self, z: Tensor, train: bool = True, update_stats: bool = True) -> Tensor:
        return self.nets["g_y"](self.store, z, train, update_stats)

    def classify(self, z: Tensor, train: bool = True) -> Tensor:
        return self.nets["h"](self.store, z, train)

    def critic_source(self, x: Tensor, train: bool = True) -> Tensor:
        return self.nets["d_x"](self.store, x, train)

    def critic_target(self, y: Tensor, train: bool = True) -> Tensor:
        return self.nets["d_y"](self.store, y, train)

    def critic_latent(self, z: Tensor, train: bool = True) -> Tensor:
        return self.nets["d_z"](self.store, z, train)

    # -- parameter bookkeeping -------------------------------------------------

    def net_param_ids(self, *names) -> list[str]:
        prefixes = [f"{n}." for n in names]
        return self.store.ids_for_prefixes(prefixes)

    def generator_param_ids(self) -> list[str]:
        return self.net_param_ids("f_x", "f_y", "g_x", "g_y", "h")

    def critic_param_ids(self) -> list[str]:
        return self.net_param_ids("d_x", "d_y", "d_z")

    def untie_encoders(self):
        """Split f_y off the shared encoder weights (value-equal copies)."""
        if not self.encoders_tied:
            raise ValueError("encoders are already untied")
        for slot in self.nets["f_y"].param_slots():
            if len(self.store.tie_group(slot)) > 1:
                self.store.untie(slot)
        self.encoders_tied = False


def build_bundle(arch: str = "digits", num_classes: int = 10, seed: int = 0,
                 critic_norm: str = "none", image_channels: int = 1) -> ModelBundle:
    store = ParamStore()
    if arch == "mlp":
        nets, latent_features = _build_mlp_nets(num_classes)
        input_shape = (2,)
    elif arch in ARCH_WIDTHS:
        w = ARCH_WIDTHS[arch]
        dz_hidden = 500 if arch == "digits" else 8 * w
        dec_mults = (8, 4, 2) if arch == "digits" else (4, 2, 1)
        nets = {
            "f_x": build_digit_encoder("f_x", w, image_channels),
            "f_y": build_digit_encoder("f_y", w, image_channels),
            "g_x": build_digit_decoder("g_x", w, image_channels, dec_mults),
            "g_y": build_digit_decoder("g_y", w, image_channels, dec_mults),
            "h": build_classifier_head("h", 8 * w, num_classes),
            "d_x": build_image_critic("d_x", w, image_channels, critic_norm),
            "d_y": build_image_critic("d_y", w, image_channels, critic_norm),
            "d_z": build_feature_discriminator("d_z", 8 * w, hidden=dz_hidden),
        }
        latent_features = 8 * w
        input_shape = (image_channels, 32, 32)
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCH_WIDTHS) + ['mlp']}")

    for net in nets.values():
        net.init(store, seed)

    # encoders share all weights; decoders share their first two layers
    # (just the first for the two-layer mlp decoder, which must keep a
    # private output layer per domain).  Normalization running statistics
    # stay per-domain: each branch trains against its own batch statistics,
    # so sharing the running estimates would evaluate both domains under a
    # mixture that matches neither.
    def _is_buffer_slot(slot):
        return slot.endswith((".bn_rm", ".bn_rv"))

    for slot in nets["f_y"].param_slots():
        if not _is_buffer_slot(slot):
            store.tie(slot.replace("f_y.", "f_x.", 1), slot)
    n_shared = 1 if arch == "mlp" else 2
    shared_decoder_layers = tuple(f"g_y.{i}." for i in range(n_shared))
    for slot in nets["g_y"].param_slots():
        if slot.startswith(shared_decoder_layers) and not _is_buffer_slot(slot):
            store.tie(slot.replace("g_y.", "g_x.", 1), slot)

    return ModelBundle(store=store, nets=nets, arch=arch, num_classes=num_classes,
                       latent_features=latent_features, critic_norm=critic_norm,
                       encoders_tied=True, input_shape=input_shape)


def parameter_count(store: ParamStore, prefix: str) -> int:
    return sum(store.get(s).size for s in store.slots()
               if s.startswith(prefix) and not store.is_buffer(store.canonical(s)))
