"""Versioned JSON artifacts for fitted models.

Arrays are stored bit-exactly, either embedded as base64 of their
little-endian bytes or in a `.npz` file next to the JSON document.
"""
import base64
import hashlib
import io
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from src import __version__
from src.domain.dto import BasisSpec, FitConfig, PriorSpec
from src.domain.errors import InputError
from src.domain.types import BasisDescriptor, CopulaLayout, FittedModel, VariationalParams
from src.infrastructure.csv_io import write_bytes_atomic
from src.services.margin_service import margin_from_dict

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KINDS = ("regression", "lfi")
# Provenance keys left out when two artifacts are compared
VOLATILE_KEYS = ("created_at",)


def config_hash(config: Any) -> str:
    """sha256 of a pydantic model or plain mapping, serialized with sorted keys."""
    if hasattr(config, "model_dump"):
        config = config.model_dump(mode="json")
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def make_provenance(config: Any, seed: int) -> dict[str, Any]:
    return {
        "config_hash": config_hash(config),
        "seed": seed,
        "version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }


class _ArrayCodec:
    """Replaces arrays inside nested dicts/lists by JSON references and back."""

    def __init__(self, sidecar: dict[str, np.ndarray] | None = None) -> None:
        self.sidecar = sidecar

    def encode(self, value: Any, key: str = "root") -> Any:
        if isinstance(value, np.ndarray):
            array = np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<"))
            if self.sidecar is not None:
                self.sidecar[key] = array
                return {"__npz__": key, "dtype": array.dtype.str, "shape": list(array.shape)}
            return {
                "__ndarray__": base64.b64encode(array.tobytes()).decode("ascii"),
                "dtype": array.dtype.str,
                "shape": list(array.shape),
            }
        if isinstance(value, dict):
            return {k: self.encode(v, f"{key}.{k}") for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [self.encode(v, f"{key}.{i}") for i, v in enumerate(value)]
        if isinstance(value, np.generic):
            return value.item()
        return value

    def decode(self, value: Any) -> Any:
        if isinstance(value, dict):
            if "__ndarray__" in value:
                raw = base64.b64decode(value["__ndarray__"])
                return np.frombuffer(raw, dtype=np.dtype(value["dtype"])).reshape(value["shape"]).copy()
            if "__npz__" in value:
                if self.sidecar is None:
                    raise InputError("artifact references a sidecar file that was not found")
                return np.asarray(self.sidecar[value["__npz__"]]).reshape(value["shape"])
            return {k: self.decode(v) for k, v in value.items()}
        if isinstance(value, list):
            return [self.decode(v) for v in value]
        return value


def _model_document(model: FittedModel) -> dict[str, Any]:
    return {
        "params": {"mu": model.params.mu, "loadings": model.params.loadings, "delta": model.params.delta},
        "layout": {
            "p": model.layout.p,
            "q": model.layout.q,
            "prior": model.layout.prior,
            "factors": model.layout.factors,
            "names": model.layout.names(),
        },
        "basis": {
            "spec": model.basis.spec.model_dump(mode="json"),
            "knots": model.basis.knots,
            "center": model.basis.center,
            "scale": model.basis.scale,
            "names": list(model.basis.names),
            "q": model.basis.q,
            "covariates": list(model.basis.covariates),
        },
        "margins": [m.to_dict() for m in model.margins],
        "response_names": list(model.response_names),
        "prior": model.prior.model_dump(mode="json"),
        "fit_config": model.fit_config.model_dump(mode="json"),
    }


def _model_from_document(doc: dict[str, Any]) -> FittedModel:
    layout = doc["layout"]
    basis = doc["basis"]
    return FittedModel(
        params=VariationalParams(
            mu=doc["params"]["mu"], loadings=doc["params"]["loadings"], delta=doc["params"]["delta"],
        ),
        layout=CopulaLayout(p=layout["p"], q=layout["q"], prior=layout["prior"], factors=layout["factors"]),
        basis=BasisDescriptor(
            spec=BasisSpec.model_validate(basis["spec"]),
            knots=basis["knots"],
            center=basis["center"],
            scale=basis["scale"],
            names=list(basis["names"]),
            q=basis["q"],
            covariates=list(basis["covariates"]),
        ),
        margins=[margin_from_dict(m) for m in doc["margins"]],
        response_names=list(doc["response_names"]),
        prior=PriorSpec.model_validate(doc["prior"]),
        fit_config=FitConfig.model_validate(doc["fit_config"]),
    )


class ArtifactStore:
    """Saves and loads fitted models.

    Args:
        sidecar (bool): store arrays in a `.npz` next to the JSON instead of embedding them

    """

    def __init__(self, sidecar: bool = False) -> None:
        self.sidecar = sidecar

    @staticmethod
    def sidecar_path(path: str | Path) -> Path:
        return Path(path).with_suffix(".npz")

    def save(
            self,
            model: FittedModel,
            path: str | Path,
            provenance: dict[str, Any],
            kind: str = "regression",
            extra: dict[str, Any] | None = None) -> Path:
        """Write the model and its provenance; returns the JSON path."""
        if kind not in KINDS:
            raise InputError(f"unknown artifact kind '{kind}'")
        arrays: dict[str, np.ndarray] | None = {} if self.sidecar else None
        codec = _ArrayCodec(arrays)
        document = {
            "schema_version": SCHEMA_VERSION,
            "kind": kind,
            "provenance": provenance,
            "model": codec.encode(_model_document(model), "model"),
            "extra": codec.encode(extra or {}, "extra"),
        }
        if arrays is not None:
            document["sidecar"] = self.sidecar_path(path).name
            buffer = io.BytesIO()
            np.savez(buffer, **arrays)
            write_bytes_atomic(buffer.getvalue(), self.sidecar_path(path))

        text = json.dumps(document, sort_keys=True, indent=2)
        write_bytes_atomic(text.encode("utf-8"), path)
        logger.info("Wrote %s artifact to %s", kind, path)
        return Path(path)

    def load(self, path: str | Path, kind: str | None = None) -> tuple[FittedModel, dict[str, Any]]:
        """Read an artifact written by `save`, embedded or with a sidecar.

        Returns:
            tuple[FittedModel, dict]: the model and the document's provenance, kind and extra fields

        Raises:
            InputError: missing or malformed file, unsupported schema or wrong kind

        """
        try:
            with open(path, encoding="utf-8") as f:
                document = json.load(f)
        except OSError as e:
            raise InputError(f"cannot read artifact {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise InputError(f"artifact {path} is not valid JSON: {e}") from e

        if document.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"artifact {path} has schema version {document.get('schema_version')}, expected {SCHEMA_VERSION}")
        if kind is not None and document.get("kind") != kind:
            raise InputError(f"artifact {path} is a '{document.get('kind')}' artifact, expected '{kind}'")

        arrays = None
        if "sidecar" in document:
            sidecar = Path(path).parent / document["sidecar"]
            try:
                with np.load(sidecar) as npz:
                    arrays = {k: npz[k] for k in npz.files}
            except OSError as e:
                raise InputError(f"cannot read artifact sidecar {sidecar}: {e}") from e
        codec = _ArrayCodec(arrays)

        try:
            model = _model_from_document(codec.decode(document["model"]))
        except (KeyError, TypeError) as e:
            raise InputError(f"artifact {path} is missing model field {e}") from e
        meta = {
            "kind": document["kind"],
            "provenance": document.get("provenance", {}),
            "extra": codec.decode(document.get("extra", {})),
        }
        logger.info("Loaded %s artifact from %s", meta["kind"], path)
        return model, meta


def comparable(document: dict[str, Any]) -> dict[str, Any]:
    """Artifact document without its volatile provenance fields."""
    out = dict(document)
    out["provenance"] = {k: v for k, v in document.get("provenance", {}).items() if k not in VOLATILE_KEYS}
    return out
