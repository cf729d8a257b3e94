from hdp_lab.analysis.driver import SweepDriver

__all__ = ['SweepDriver']
