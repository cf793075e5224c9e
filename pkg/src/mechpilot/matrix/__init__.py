from mechpilot.matrix.coding import (
    CATEGORIES,
    AccessLevel,
    CellMismatch,
    ClaimCategoryCoding,
    Color,
    Finding,
    InstrumentRow,
    MatrixError,
    Recoding,
    SensitivityReport,
    UnknownCategory,
    UnknownRow,
    aggregate_finding,
    cell_color,
    dump_csv,
    load_csv,
    load_recodings,
    parse_csv,
    row_display,
    rows_digest,
    sensitivity,
    shipped_inventory,
    shipped_inventory_path,
    shipped_recodings_path,
    summarize,
)

__all__ = [
    "CATEGORIES",
    "AccessLevel",
    "CellMismatch",
    "ClaimCategoryCoding",
    "Color",
    "Finding",
    "InstrumentRow",
    "MatrixError",
    "Recoding",
    "SensitivityReport",
    "UnknownCategory",
    "UnknownRow",
    "aggregate_finding",
    "cell_color",
    "dump_csv",
    "load_csv",
    "load_recodings",
    "parse_csv",
    "row_display",
    "rows_digest",
    "sensitivity",
    "shipped_inventory",
    "shipped_inventory_path",
    "shipped_recodings_path",
    "summarize",
]
