"""Model pool: capability-ordered, price-tagged model identities.

Prices are cents per 1000 tokens. Costs are carried as integer micro-cents
so that ledgers sum without floating-point drift; a price may have at most
three decimal places, which makes ``price * tokens * 1000`` an integer.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path

from .errors import (
    DuplicateName,
    EmptyGroup,
    LocalWithNonzeroPrice,
    NegativePrice,
    PoolConfigError,
    PoolTooSmall,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MICROCENTS_PER_CENT = 1_000_000
PRICE_QUANTUM = Decimal("0.001")


class Deployment(str, Enum):
    LOCAL = "local"
    CLOUD = "cloud"


@dataclass(frozen=True)
class ModelSpec:
    id: int
    name: str
    capability_rank: int
    deployment: Deployment
    price_in: Decimal  # cents per 1k input tokens
    price_out: Decimal  # cents per 1k output tokens
    endpoint: str | None = None
    api_key_env: str | None = None

    @property
    def is_local(self) -> bool:
        return self.deployment is Deployment.LOCAL


@dataclass(frozen=True)
class Usage:
    tokens_in: int = 0
    tokens_out: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.tokens_in + other.tokens_in, self.tokens_out + other.tokens_out)

    @property
    def total(self) -> int:
        return self.tokens_in + self.tokens_out


@dataclass(frozen=True)
class ModelPool:
    models: tuple[ModelSpec, ...]
    eval_model_id: int = 0

    def __post_init__(self):
        ranks = [m.capability_rank for m in self.models]
        if ranks != list(range(len(self.models))):
            raise PoolConfigError("capability ranks must be 0..n-1 in listed order")
        if not 0 <= self.eval_model_id < len(self.models):
            raise PoolConfigError(f"eval_model_id {self.eval_model_id} out of range")

    def __len__(self) -> int:
        return len(self.models)

    def __getitem__(self, model_id: int) -> ModelSpec:
        return self.models[model_id]

    def __iter__(self):
        return iter(self.models)

    @property
    def max_id(self) -> int:
        return len(self.models) - 1

    @property
    def local(self) -> list[ModelSpec]:
        return [m for m in self.models if m.is_local]

    @property
    def cloud(self) -> list[ModelSpec]:
        return [m for m in self.models if not m.is_local]

    def by_name(self, name: str) -> ModelSpec:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)

    def resolve(self, ref: int | str) -> ModelSpec:
        """Look a model up by id or by name."""
        if isinstance(ref, int) or (isinstance(ref, str) and ref.isdigit()):
            idx = int(ref)
            if not 0 <= idx < len(self.models):
                raise PoolConfigError(f"model id {idx} out of range")
            return self.models[idx]
        try:
            return self.by_name(ref)
        except KeyError:
            raise PoolConfigError(f"unknown model {ref!r}") from None


@dataclass(frozen=True)
class GroupedPool:
    slm_group: tuple[ModelSpec, ...]
    mlm_group: tuple[ModelSpec, ...]
    llm_group: tuple[ModelSpec, ...]
    groups: tuple[tuple[ModelSpec, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "groups", (self.slm_group, self.mlm_group, self.llm_group))

    def tier_of(self, model_id: int) -> int:
        for tier, group in enumerate(self.groups):
            if group[0].id <= model_id <= group[-1].id:
                return tier
        raise ValueError(f"model {model_id} not in any group")

    def flatten(self) -> list[ModelSpec]:
        return [m for g in self.groups for m in g]


def _price(raw, field_name: str, model_name: str) -> Decimal:
    try:
        value = Decimal(str(raw))
    except InvalidOperation:
        raise PoolConfigError(f"{model_name}: {field_name} is not a number: {raw!r}") from None
    if not value.is_finite():
        raise PoolConfigError(f"{model_name}: {field_name} must be finite")
    if value < 0:
        raise NegativePrice(f"{model_name}: {field_name} = {value} < 0")
    if value != value.quantize(PRICE_QUANTUM):
        raise PoolConfigError(
            f"{model_name}: {field_name} = {value} has more than 3 decimal places"
        )
    return value


def pool_from_dict(doc: dict) -> ModelPool:
    entries = doc.get("models")
    if not entries:
        raise PoolConfigError("pool config lists no models")
    seen: set[str] = set()
    models = []
    for idx, entry in enumerate(entries):
        try:
            name = str(entry["name"])
            deployment = Deployment(str(entry["deployment"]).lower())
        except KeyError as exc:
            raise PoolConfigError(f"model #{idx} missing field {exc}") from None
        except ValueError:
            raise PoolConfigError(
                f"{entry.get('name')}: deployment must be 'local' or 'cloud'"
            ) from None
        if name in seen:
            raise DuplicateName(name)
        seen.add(name)
        price_in = _price(entry.get("price_in_cents_per_1k", 0), "price_in_cents_per_1k", name)
        price_out = _price(entry.get("price_out_cents_per_1k", 0), "price_out_cents_per_1k", name)
        if deployment is Deployment.LOCAL and (price_in != 0 or price_out != 0):
            raise LocalWithNonzeroPrice(f"{name}: local models are free")
        models.append(
            ModelSpec(
                id=idx,
                name=name,
                capability_rank=idx,
                deployment=deployment,
                price_in=price_in,
                price_out=price_out,
                endpoint=entry.get("endpoint"),
                api_key_env=entry.get("api_key_env"),
            )
        )
    eval_ref = doc.get("eval_model", doc.get("eval_model_id", 0))
    pool = ModelPool(tuple(models), 0)
    return ModelPool(tuple(models), pool.resolve(eval_ref).id)


def load_pool(source: str | Path | dict) -> ModelPool:
    """Load a pool from a TOML or JSON document (path, text, or parsed dict).

    Models are indexed in listed order, weakest first.
    """
    if isinstance(source, dict):
        return pool_from_dict(source)
    path = Path(source) if not isinstance(source, str) or "\n" not in source else None
    if path is not None and path.exists():
        text = path.read_text()
        is_json = path.suffix == ".json"
    elif path is not None and isinstance(source, Path):
        raise FileNotFoundError(source)
    else:
        text = str(source)
        is_json = text.lstrip().startswith("{")
    try:
        doc = json.loads(text) if is_json else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise PoolConfigError(f"cannot parse pool config: {exc}") from None
    return pool_from_dict(doc)


def partition_groups(pool: ModelPool) -> GroupedPool:
    """Split the pool into three contiguous capability groups.

    Sizes differ by at most one and any remainder goes to the lower groups,
    so 7 models split as 3/2/2.
    """
    n = len(pool)
    if n < 3:
        raise PoolTooSmall(f"need at least 3 models to group, got {n}")
    base, extra = divmod(n, 3)
    sizes = [base + (1 if i < extra else 0) for i in range(3)]
    models = list(pool.models)
    out, start = [], 0
    for size in sizes:
        out.append(tuple(models[start : start + size]))
        start += size
    return GroupedPool(*out)


def medium_model(group) -> ModelSpec:
    """Lower median of a capability-ordered group."""
    if not group:
        raise EmptyGroup("cannot take the medium model of an empty group")
    return group[(len(group) - 1) // 2]


def usage_cost_microcents(usage: Usage, model: ModelSpec) -> int:
    if usage.tokens_in < 0 or usage.tokens_out < 0:
        raise ValueError("token counts must be non-negative")
    cost = model.price_in * usage.tokens_in + model.price_out * usage.tokens_out
    # price has <= 3 decimals, so cents/1000 * 1e6 is exact
    return int(cost * 1000)


def usage_cost(usage: Usage, model: ModelSpec) -> Decimal:
    """Cost of one call in cents (exact)."""
    return microcents_to_cents(usage_cost_microcents(usage, model))


def microcents_to_cents(value: int) -> Decimal:
    return Decimal(value) / MICROCENTS_PER_CENT


def default_pool() -> ModelPool:
    """The bundled nine-model pool (four free local models, five priced cloud models)."""
    from importlib import resources

    return load_pool(resources.files("costroute").joinpath("data/nine_model_pool.toml").read_text())
