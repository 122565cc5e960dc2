"""Decision-tree policy extraction guided by action-value vector clustering."""

__version__ = "0.1.0"
