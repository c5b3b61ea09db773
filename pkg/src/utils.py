"""Shared utilities: console output, seeding, image IO, record logs."""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, Iterable, TypeVar, Union

import numpy as np
import torch
from PIL import Image
from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TextColumn,
    TimeElapsedColumn,
)
from rich.rule import Rule

from src import APP_NAME, __version__
from src.errors import ConfigError

# Shared console instance for all output
console = Console()

PathLike = Union[str, Path]
T = TypeVar("T")


# ---------------------------------------------------------------------------
# Non-UI helpers
# ---------------------------------------------------------------------------

def derive_seed(seed: int, *tags: Union[str, int]) -> int:
    """Derive a child seed from the master *seed* and a path of *tags*.

    Tags are hashed into the spawn key of a ``SeedSequence`` so that
    ``derive_seed(s, "trainer", "coarse", 7)`` is stable across runs and
    independent of every other tag path.
    """
    key = []
    for tag in tags:
        if isinstance(tag, str):
            raw = tag.encode("utf-8")
            key.append(len(raw))
            key.extend(raw)
        else:
            key.append(int(tag))
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key))
    return int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def make_generator(seed: int, *tags: Union[str, int]) -> torch.Generator:
    """CPU ``torch.Generator`` seeded from :func:`derive_seed`."""
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *tags) if tags else int(seed))
    return g


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # PyYAML reads exponent forms like 1e-3 as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key '{key}' must be a list, got {value!r}")
        # numeric tuples are fixed-size ranges
        if kind in (int, float) and len(value) != len(default):
            raise ConfigError(f"config key '{key}' must be a list of {len(default)} values, got {value!r}")
        try:
            return tuple(kind(v) for v in value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config key '{key}' has a bad entry: {e}") from e
    return value


def apply_mapping(base: T, mapping: dict[str, Any], ignore: Iterable[str] = ()) -> T:
    """Return a copy of dataclass *base* with the values of a flat *mapping*.

    Keys may use '-' or '_'. Unknown keys raise :class:`ConfigError` unless
    listed in *ignore*; values are checked against the type of the default.
    """
    names = {f.name for f in dataclasses.fields(base)}
    skip = {k.replace("-", "_") for k in ignore}
    updates = {}
    for raw_key, value in mapping.items():
        key = str(raw_key).replace("-", "_")
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"unknown config key '{raw_key}' (expected one of: {', '.join(sorted(names))})")
        updates[key] = _coerce(key, value, getattr(base, key))
    return dataclasses.replace(base, **updates)


def atomic_write(path: PathLike, writer: Callable[[Path], None]) -> Path:
    """Call ``writer(tmp_path)`` then move the temp file onto *path*.

    Nothing appears at *path* unless *writer* completes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def to_chw(image: torch.Tensor) -> torch.Tensor:
    """Return an image as (3, H, W); accepts (H, W, 3) or (3, H, W)."""
    if image.dim() != 3:
        raise ValueError(f"expected a 3-D image tensor, got shape {tuple(image.shape)}")
    if image.shape[0] == 3:
        return image
    if image.shape[-1] == 3:
        return image.permute(2, 0, 1)
    raise ValueError(f"image has no RGB axis: shape {tuple(image.shape)}")


def save_png(image: torch.Tensor, path: PathLike) -> Path:
    """Write a [0,1] image tensor ((3,H,W) or (H,W,3)) as an 8-bit PNG."""
    hwc = to_chw(image.detach().cpu().float()).permute(1, 2, 0)
    pixels = (hwc.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).numpy()
    return atomic_write(path, lambda tmp: Image.fromarray(pixels, "RGB").save(tmp, format="PNG"))


def load_png(path: PathLike, resolution: int | None = None) -> torch.Tensor:
    """Read an image file as a (3, H, W) float tensor in [0,1].

    With *resolution*, the image is resized (bicubic) to a square of that size.
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BICUBIC)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


class RecordLog:
    """Context manager for line-delimited JSON record files.

    Each record is appended and flushed immediately so a crashed run keeps
    every line written before the failure.
    """

    def __init__(self, path: PathLike | None, mode: str = "a") -> None:
        self.path = Path(path) if path is not None else None
        self._mode = mode
        self._file: Any = None

    def __enter__(self) -> RecordLog:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, self._mode, encoding="utf-8")
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, record: dict[str, Any]) -> None:
        """Append one record. A log without a path discards records."""
        if self._file is None:
            return
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()


def read_records(path: PathLike) -> list[dict[str, Any]]:
    """Read back every record of a JSONL log."""
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Console primitives
# ---------------------------------------------------------------------------

def print_header() -> None:
    """Print the application header in a centered double-line box."""
    console.print()
    console.print(
        Panel(
            f"[bold cyan]-= {APP_NAME} =-[/bold cyan]\n"
            f"[dim]v{__version__}[/dim]",
            box=box.DOUBLE,
            border_style="bright_blue",
            expand=False,
            padding=(1, 4),
        ),
        justify="center",
    )
    console.print()


def print_rule(title: str = "", style: str = "bright_blue") -> None:
    """Print a horizontal rule, optionally with a centered title."""
    console.print()
    if title:
        console.print(Rule(title, style=style))
    else:
        console.print(Rule(style="dim"))


def print_success(msg: str) -> None:
    """Print a success message with ✓ prefix."""
    console.print(f"[bold green]✓[/bold green] {msg}")


def print_error(msg: str) -> None:
    """Print an error message with ✗ prefix."""
    console.print(f"[bold red]✗[/bold red] [red]{msg}[/red]")


def print_warning(msg: str) -> None:
    """Print a warning message with ⚠ prefix."""
    console.print(f"[bold yellow]⚠[/bold yellow] [yellow]{msg}[/yellow]")


def print_info(msg: str) -> None:
    """Print an informational message with › prefix."""
    console.print(f"[dim]›[/dim] {msg}")


def make_progress(disable: bool = False) -> Progress:
    """Progress bar bound to the shared console."""
    return Progress(
        TextColumn("[bold cyan]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("{task.fields[status]}"),
        TimeElapsedColumn(),
        console=console,
        disable=disable,
        transient=False,
    )
