"""Tabular datasets: validated numeric matrices with named, typed columns."""
import json
import logging
import math
import pkgutil
import re
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, root_validator, validator
from typing_extensions import Literal

from causal_fuzz.errors import DataError

logger = logging.getLogger(__name__)

Kind = Literal["continuous", "binary"]


class Dataset(BaseModel):
    columns: List[str]
    kinds: Dict[str, Kind]
    values: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("values", pre=True)
    def _as_matrix(cls, value):
        return np.asarray(value, dtype=float)

    @root_validator(skip_on_failure=True)
    def _check(cls, values):
        columns = values["columns"]
        matrix = np.asarray(values["values"], dtype=float)
        if matrix.ndim != 2 or matrix.shape[1] != len(columns):
            raise ValueError(f"values must be a rows x {len(columns)} matrix, got shape {matrix.shape}")
        if len(set(columns)) != len(columns):
            raise ValueError("duplicate column names")
        if set(values["kinds"]) != set(columns):
            raise ValueError("kinds must name every column exactly once")
        if not np.all(np.isfinite(matrix)):
            row, col = np.argwhere(~np.isfinite(matrix))[0]
            raise ValueError(f"non-finite value in column {columns[col]!r} at row {row}")
        for j, name in enumerate(columns):
            if values["kinds"][name] == "binary" and not np.all((matrix[:, j] == 0) | (matrix[:, j] == 1)):
                raise ValueError(f"binary column {name!r} contains values other than 0/1")
        values["values"] = matrix
        return values

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise DataError(f"column {name!r} missing from dataset") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return self.values[:, [self.index(n) for n in names]]

    def take(self, rows) -> "Dataset":
        return Dataset(columns=self.columns, kinds=self.kinds, values=self.values[np.asarray(rows, dtype=int)])

    def select(self, names: Sequence[str]) -> "Dataset":
        return Dataset(columns=list(names), kinds={n: self.kinds[n] for n in names}, values=self.matrix(names))

    def drop(self, name: str) -> "Dataset":
        self.index(name)
        return self.select([c for c in self.columns if c != name])


def build_dataset(columns: Sequence[str], kinds: Dict[str, str], values) -> Dataset:
    try:
        return Dataset(columns=list(columns), kinds=kinds, values=values)
    except ValidationError as e:
        raise DataError(e.errors()[0]["msg"]) from e


def _infer_kind(name: str, cells: List[str], column: np.ndarray, options: "CsvOptions") -> str:
    """Binary needs integer 0/1 cells, so a float column saved as 0.0/1.0 stays continuous."""
    if not len(column):
        return "continuous"
    if name in options.binarize:
        return "binary"
    if name in options.encodings:
        return "binary" if np.all((column == 0) | (column == 1)) else "continuous"
    return "binary" if all(cell.strip() in ("0", "1") for cell in cells) else "continuous"


class CsvOptions(BaseModel):
    header: bool = True
    delimiter: str = ","
    # column names for header-less files (or to rename a header)
    names: Optional[List[str]] = None
    # subset of columns to keep, in output order
    columns: Optional[List[str]] = None
    skip_initial_space: bool = False
    # column -> {raw value -> number}; the only way categorical text becomes numeric
    encodings: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    # column -> cut; value >= cut becomes 1, otherwise 0
    binarize: Dict[str, float] = Field(default_factory=dict)


def _read_cells(path, options: CsvOptions) -> Tuple[List[str], pd.DataFrame, int]:
    try:
        raw = pd.read_csv(
            path,
            sep=options.delimiter,
            header=None,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=options.skip_initial_space,
            encoding="utf-8",
        )
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        line = match.group(1) if match else "?"
        raise DataError(f"ragged row at line {line}") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: no rows") from e
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 text (byte {e.start})") from e

    if options.header:
        names = [str(v).strip() for v in raw.iloc[0]]
        body = raw.iloc[1:].reset_index(drop=True)
        first_line = 2
    else:
        names = [f"c{i}" for i in range(raw.shape[1])]
        body = raw
        first_line = 1
    if options.names is not None:
        if len(options.names) != raw.shape[1]:
            raise DataError(f"{len(options.names)} names given for {raw.shape[1]} columns")
        names = list(options.names)
    body.columns = names

    short = body.isna().any(axis=1).to_numpy()
    if short.any():
        raise DataError(f"ragged row at line {int(np.argmax(short)) + first_line}")
    return names, body, first_line


def _convert(name: str, cells: List[str], options: CsvOptions, first_line: int) -> np.ndarray:
    mapping = options.encodings.get(name)
    out = np.empty(len(cells), dtype=float)
    for i, cell in enumerate(cells):
        if mapping is not None:
            if cell not in mapping:
                raise DataError(f"unmapped category {cell!r} in column {name!r} at line {i + first_line}")
            value = float(mapping[cell])
        else:
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"non-numeric value {cell!r} in column {name!r} at line {i + first_line}") from None
        if not math.isfinite(value):
            raise DataError(f"non-finite value {cell!r} in column {name!r} at line {i + first_line}")
        out[i] = value
    if name in options.binarize:
        out = (out >= options.binarize[name]).astype(float)
    return out


def load_csv(path, schema: Optional[Dict[str, Kind]] = None, options: Optional[CsvOptions] = None) -> Dataset:
    options = options or CsvOptions()
    names, body, first_line = _read_cells(path, options)

    keep = options.columns or (list(schema) if schema else names)
    for name in keep:
        if name not in names:
            raise DataError(f"column {name!r} not found in {path}")

    cells = {name: body[name].tolist() for name in keep}
    columns = [_convert(name, cells[name], options, first_line) for name in keep]
    values = np.column_stack(columns) if columns else np.empty((len(body), 0))
    kinds = {}
    for name, column in zip(keep, columns):
        kinds[name] = (schema or {}).get(name) or _infer_kind(name, cells[name], column, options)
    data = build_dataset(keep, kinds, values)
    logger.info("loaded %s: %d rows, %d columns", path, data.n_rows, len(keep))
    return data


def _format_cell(value: float, kind: str) -> str:
    if kind == "binary":
        return str(int(value))
    # repr of a Python float is the shortest string that round-trips
    return repr(float(value))


def save_csv(data: Dataset, path) -> None:
    frame = pd.DataFrame(
        {name: [_format_cell(v, data.kinds[name]) for v in data.values[:, j]] for j, name in enumerate(data.columns)},
        columns=data.columns,
    )
    frame.to_csv(path, index=False, lineterminator="\n")


def split(data: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < fraction < 1:
        raise DataError("fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(data.n_rows)
    cut = int(math.floor(data.n_rows * fraction))
    return data.take(order[:cut]), data.take(order[cut:])


class LoaderSpec(BaseModel):
    """Bundled preprocessing for a public CSV. The encodings are our choices."""

    note: str
    options: CsvOptions
    kinds: Dict[str, Kind]


def bundled_loader(name: str) -> LoaderSpec:
    try:
        payload = pkgutil.get_data(__package__, f"datasets/{name}.loader.json")
    except FileNotFoundError:
        payload = None
    if payload is None:
        raise DataError(f"no bundled loader named {name!r}")
    return LoaderSpec.parse_obj(json.loads(payload.decode()))


def load_bundled(name: str, path) -> Dataset:
    spec = bundled_loader(name)
    return load_csv(path, schema=spec.kinds, options=spec.options)


def load_adult(path) -> Dataset:
    return load_bundled("adult", path)


def load_drug(path) -> Dataset:
    return load_bundled("drug", path)
