"""mskquant 核心模块

volume_core -> morphology -> overlap_metrics / biomarkers -> agreement_stats / clinical_models，
由 pipeline 按命令编排。
"""
__all__ = [
    "volume_core", "morphology", "overlap_metrics", "biomarkers",
    "agreement_stats", "clinical_models", "phantoms", "pipeline",
]
