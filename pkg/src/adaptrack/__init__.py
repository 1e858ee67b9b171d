"""adaptrack - 带空间/时间/身份适配器的多目标跟踪嵌入精炼（合成数据玩具实现）"""

__version__ = "0.1.0"
