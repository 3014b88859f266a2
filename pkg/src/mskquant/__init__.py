"""mskquant - 肌骨影像定量分析

统一的包入口。
"""
__all__ = ["cli"]
