from .export import ExportError, ExportPlan, HookPoint, export
from .store_format import write_blob_file, write_manifest

__all__ = ["ExportError", "ExportPlan", "HookPoint", "export",
           "write_blob_file", "write_manifest"]
