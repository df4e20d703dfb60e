"""Groups of base learners stacked by backcast residuals."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .basis import BasisSpec, Kind
from .comms import CommParams, communicate
from .gating import (TOKEN_MODES, ActivationRecord, GatingParams, input_attention,
                     select_topk, token_width, tokenize_window)

INTERPRETABLE_KINDS = (Kind.TREND, Kind.SEASONALITY, Kind.GENERIC)


@dataclass
class ModelConfig:
    lookback: int
    horizon: int
    groups: int = 4
    learners: int = 3
    topk: int = 2
    layers: int = 4
    hidden: int = 256
    context: int = 64
    d_k: int = 64
    d_v: int = 64
    d_c: int = 64
    alpha: float = 0.1
    comm_dropout: float = 0.5
    trend_degree: int = 2
    mode: str = "interpretable"
    token_mode: str = "pointwise"
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        for name in ("lookback", "horizon", "groups", "learners", "layers", "hidden",
                     "context", "d_k", "d_v", "d_c"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if not 1 <= self.topk <= self.learners:
            out.append(f"topk must satisfy 1 <= topk <= learners (got topk={self.topk}, learners={self.learners})")
        if not 0.0 < self.alpha < 1.0:
            out.append(f"alpha must lie in (0, 1) (got {self.alpha})")
        if not 0.0 <= self.comm_dropout < 1.0:
            out.append(f"comm_dropout must lie in [0, 1) (got {self.comm_dropout})")
        if self.mode not in ("interpretable", "generic"):
            out.append(f"mode must be 'interpretable' or 'generic' (got {self.mode!r})")
        if self.token_mode not in TOKEN_MODES:
            out.append(f"token_mode must be one of {TOKEN_MODES} (got {self.token_mode!r})")
        if self.mode == "interpretable":
            if self.horizon < 4:
                out.append(f"interpretable mode needs horizon >= 4 for the seasonality basis (got {self.horizon})")
            if self.trend_degree < 0 or self.trend_degree >= min(self.lookback, self.horizon):
                out.append(f"trend_degree must lie in [0, min(lookback, horizon)) (got {self.trend_degree})")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        return self

    def kinds(self) -> tuple[Kind, ...]:
        if self.mode == "generic":
            return (Kind.GENERIC,) * self.learners
        return tuple(INTERPRETABLE_KINDS[g % 3] for g in range(self.learners))

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass
class LearnerContext:
    index: int
    theta: np.ndarray
    kind: Kind


@dataclass
class GroupTrace:
    index: int
    input: np.ndarray  # (B, t)
    activation: ActivationRecord
    learner_backcasts: np.ndarray  # (G, B, t), zero for inactive learners
    learner_forecasts: np.ndarray  # (G, B, H)
    backcast: np.ndarray  # (B, t)
    forecast: np.ndarray  # (B, H)
    residual: np.ndarray  # (B, t)
    thetas: np.ndarray  # (G, B, D) after communication


class Group:
    """Parameters of one group; learners are stacked along a leading axis."""

    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator):
        self.index = index
        self.cfg = cfg
        G, D = cfg.learners, cfg.context
        tw = token_width(cfg.token_mode, cfg.lookback)
        pre = f"g{index}."
        self.params: dict[str, dc.Array] = {}

        def new(name, shape, fan_in, fan_out):
            arr = dc.Array(dc.glorot_uniform(rng, shape, fan_in, fan_out), requires_grad=True,
                           name=pre + name)
            self.params[pre + name] = arr
            return arr

        def zeros(name, shape):
            arr = dc.Array(np.zeros(shape), requires_grad=True, name=pre + name)
            self.params[pre + name] = arr
            return arr

        self.gating = GatingParams(wk=new("wk", (tw, cfg.d_k), tw, cfg.d_k),
                                   wv=new("wv", (tw, cfg.d_v), tw, cfg.d_v),
                                   wq=new("wq", (G, D, cfg.d_k), D, cfg.d_k))
        widths = [cfg.d_v] + [cfg.hidden] * (cfg.layers - 1) + [D]
        self.layers = []
        for m in range(cfg.layers):
            w = new(f"fc{m}.w", (G, widths[m], widths[m + 1]), widths[m], widths[m + 1])
            b = zeros(f"fc{m}.b", (G, 1, widths[m + 1]))
            self.layers.append((w, b))
        self.specs = [BasisSpec(kind, cfg.lookback, cfg.horizon, cfg.trend_degree)
                      for kind in cfg.kinds()]
        self.heads = []
        self.bases = []
        for g, spec in enumerate(self.specs):
            nb, nf = spec.backcast_dim, spec.forecast_dim
            self.heads.append((new(f"head{g}.wb", (D, nb), D, nb), zeros(f"head{g}.bb", (nb,)),
                               new(f"head{g}.wf", (D, nf), D, nf), zeros(f"head{g}.bf", (nf,))))
            bmat, fmat = spec.matrices()
            self.bases.append((None if bmat is None else dc.Array(bmat.T),
                               None if fmat is None else dc.Array(fmat.T)))
        self.comm = CommParams(wq=new("cq", (G, D, cfg.d_c), D, cfg.d_c),
                               wk=new("ck", (G, D, cfg.d_c), D, cfg.d_c),
                               wv=new("cv", (G, D, D), D, D),
                               alpha=cfg.alpha, rho=cfg.comm_dropout)

    def learner_params(self, g: int, grad: bool = False) -> dict[str, np.ndarray]:
        """Views of every parameter slice that belongs to learner ``g``.

        With ``grad`` the matching slices of the gradients are returned instead
        (zeros where no gradient has been recorded).
        """
        out = {}
        for name, arr in self.params.items():
            short = name.split(".", 1)[1]
            if short in ("wk", "wv"):
                continue  # shared by all learners
            data = arr.value if not grad else (arr.grad if arr.grad is not None
                                               else np.zeros_like(arr.value))
            if short.startswith("head"):
                if short.startswith(f"head{g}."):
                    out[name] = data
            else:
                out[name] = data[g]
        return out

    def embed(self, pooled: dc.Array) -> dc.Array:
        h = pooled
        for w, b in self.layers:
            h = dc.relu(h @ w + b)
        return h

    def predict(self, g: int, theta: dc.Array):
        wb, bb, wf, bf = self.heads[g]
        bmat, fmat = self.bases[g]
        theta_b = theta @ wb + bb
        theta_f = theta @ wf + bf
        back = theta_b if bmat is None else theta_b @ bmat
        fore = theta_f if fmat is None else theta_f @ fmat
        return back, fore

    def forward(self, x: dc.Array, thetas_prev: dc.Array, training: bool = False,
                rng: np.random.Generator | None = None, active: np.ndarray | None = None):
        cfg = self.cfg
        G = cfg.learners
        B = x.shape[0]
        tokens = tokenize_window(x, cfg.token_mode)
        pooled, relevance, weights = input_attention(thetas_prev, tokens, self.gating)
        if active is None:
            active = select_topk(relevance, cfg.topk)
        active = np.asarray(active, dtype=bool)
        on = active[..., None]
        thetas = dc.where(on, self.embed(pooled), thetas_prev)
        thetas, _ = communicate(thetas, active, self.comm, training=training, rng=rng)

        backs, fores, back_vals, fore_vals = [], [], [], []
        for g in range(G):
            theta_g = dc.reshape(thetas[g], (B, cfg.context))
            back, fore = self.predict(g, theta_g)
            back = dc.where(on[g], back, 0.0)
            fore = dc.where(on[g], fore, 0.0)
            backs.append(back)
            fores.append(fore)
            back_vals.append(back.value)
            fore_vals.append(fore.value)
        back_sum, fore_sum = backs[0], fores[0]
        for g in range(1, G):
            back_sum = back_sum + backs[g]
            fore_sum = fore_sum + fores[g]
        group_back = back_sum * (1.0 / G)
        group_fore = fore_sum * (1.0 / G)
        residual = x - group_back
        trace = GroupTrace(
            index=self.index, input=x.value,
            activation=ActivationRecord(self.index, relevance, active, weights),
            learner_backcasts=np.stack(back_vals), learner_forecasts=np.stack(fore_vals),
            backcast=group_back.value, forecast=group_fore.value, residual=residual.value,
            thetas=thetas.value)
        return residual, group_fore, thetas, trace


class IDEAModel:
    """L groups chained by backcast residuals; the forecast is the sum of group forecasts."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = dc.make_rng(config.seed)
        self.groups = [Group(l, config, rng) for l in range(config.groups)]
        theta0 = rng.uniform(-0.1, 0.1, size=(config.learners, 1, config.context))
        self.theta0 = dc.Array(theta0, requires_grad=True, name="theta0")

    @property
    def kinds(self) -> tuple[Kind, ...]:
        return self.config.kinds()

    def named_parameters(self) -> dict[str, dc.Array]:
        out = {"theta0": self.theta0}
        for group in self.groups:
            out.update(group.params)
        return out

    def parameters(self) -> list[dc.Array]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None,
                gates: list | None = None):
        """Run every group on a batch ``x`` of shape ``(B, t)``.

        ``gates`` optionally pins the ``(G, B)`` activation mask of each group.
        Returns ``(forecast Array (B, H), [GroupTrace, ...])``.
        """
        x = x if isinstance(x, dc.Array) else dc.Array(x)
        if x.ndim != 2 or x.shape[1] != self.config.lookback:
            raise dc.ShapeError("model_forward", x.shape,
                                detail=f"expected (batch, {self.config.lookback})")
        thetas = self.theta0
        forecast = None
        traces = []
        for l, group in enumerate(self.groups):
            active = None if gates is None else gates[l]
            x, fore, thetas, trace = group.forward(x, thetas, training=training, rng=rng,
                                                   active=active)
            forecast = fore if forecast is None else forecast + fore
            traces.append(trace)
        return forecast, traces

    def predict(self, x) -> np.ndarray:
        """Inference on raw numpy windows, ``(t,)`` or ``(B, t)``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out, _ = self.forward(x[None, :] if single else x)
        return out.value[0] if single else out.value

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise dc.ShapeError("load_state_dict", p.shape, value.shape, detail=name)
            p.value[...] = value

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"config": asdict(self.config), "extra": extra or {}}
        arrays = self.state_dict()
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "IDEAModel":
        model, _ = load_checkpoint(path)
        return model


def load_checkpoint(path) -> tuple[IDEAModel, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        state = {k: data[k] for k in data.files if k != "__meta__"}
    model = IDEAModel(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta.get("extra", {})


def init_model(config: ModelConfig) -> IDEAModel:
    return IDEAModel(config)


def learner_embed(group: Group, g: int, pooled) -> np.ndarray:
    """Context vector of learner ``g`` for one pooled input (numpy, no record)."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape[-1] != group.cfg.d_v:
        raise dc.ShapeError("learner_embed", pooled.shape, detail=f"expected width {group.cfg.d_v}")
    h = pooled
    for w, b in group.layers:
        h = np.maximum(h @ w.value[g] + b.value[g, 0], 0.0)
    return h


def learner_predict(group: Group, g: int, theta) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != group.cfg.context:
        raise dc.ShapeError("learner_predict", theta.shape,
                            detail=f"expected width {group.cfg.context}")
    single = theta.ndim == 1
    back, fore = group.predict(g, dc.Array(theta[None, :] if single else theta))
    if single:
        return back.value[0], fore.value[0]
    return back.value, fore.value
