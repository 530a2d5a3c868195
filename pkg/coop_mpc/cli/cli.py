from __future__ import annotations

import argparse

from typing import Any, List, Type, TypeVar, Union

from pydantic import BaseModel


def _get_base_type(annotation: Type[Any]) -> Type[Any]:
    # Optional[X] -> X
    if getattr(annotation, "__origin__", None) is Union:
        non_optional_args: List[Type[Any]] = [
            arg for arg in annotation.__args__ if arg is not type(None)  # type: ignore
        ]
        if non_optional_args:
            return _get_base_type(non_optional_args[0])
    return annotation


def add_args_from_model(parser: argparse.ArgumentParser, model: Type[BaseModel]):
    """Add one `--flag` per field of a pydantic model; booleans become switches.

    Flags default to `None` so unset flags fall through to the model's own
    defaults and environment variables.
    """
    for name, field in model.model_fields.items():
        description = field.description or ""
        if field.default is not None and not field.is_required():
            description += f" (default: {field.default})"
        base_type = _get_base_type(field.annotation) if field.annotation is not None else str
        flag = f"--{name.replace('_', '-')}"
        if base_type is bool:
            parser.add_argument(
                flag, dest=name, action="store_true", default=None, help=description
            )
        else:
            parser.add_argument(flag, dest=name, type=base_type, help=description)


T = TypeVar("T", bound=BaseModel)


def parse_model_from_args(model: Type[T], args: argparse.Namespace) -> T:
    """Build a pydantic model from the flags that were actually given."""
    return model(
        **{k: v for k, v in vars(args).items() if v is not None and k in model.model_fields}
    )
