"""任务路由 - 判断一个 TDP 条目能否在客户端本地完成，还是需要跨客户端上下文"""

from enum import Enum
from typing import Optional

from core.tasks import TASK_FORMAT, OutputFormat, TaskKind
from core.trajectory import SubTrajectory

# 需要整条轨迹形状的逐点任务
WHOLE_TRAJECTORY_TASKS = frozenset({TaskKind.TSim, TaskKind.TSeg})
# 依赖当前点与下一点之间间隙的任务
GAP_TASKS = frozenset({TaskKind.TI, TaskKind.TR})


class Route(Enum):
    """条目的执行位置"""
    LOCAL = "local"
    CROSS_CLIENT = "cross_client"


def needs_whole_trajectory(task: TaskKind) -> bool:
    return TASK_FORMAT[task] is OutputFormat.CLASSIFICATION or task in WHOLE_TRAJECTORY_TASKS


def route_task(task: TaskKind, sub: SubTrajectory, n_segments: int, index: Optional[int] = None) -> Route:
    """
    按任务所需的上下文窗口是否跨出本客户端区域来路由

    Args:
        task: 任务类型
        sub: 客户端持有的子轨迹
        n_segments: 父轨迹被切成的段数
        index: 逐点任务的点下标；分类任务忽略

    Returns:
        Route.LOCAL 或 Route.CROSS_CLIENT
    """
    if n_segments <= 1:
        return Route.LOCAL
    if needs_whole_trajectory(task):
        return Route.CROSS_CLIENT
    if index is None:
        raise ValueError(f"{task.value} routes per point and needs an index")

    has_before = sub.segment_index > 0
    has_after = sub.segment_index < n_segments - 1
    last = len(sub.points) - 1
    if task in GAP_TASKS:
        # 最后一个点到下一段首点之间的间隙
        return Route.CROSS_CLIENT if index == last and has_after else Route.LOCAL
    # 前后各一个点的邻域
    if (index == 0 and has_before) or (index == last and has_after):
        return Route.CROSS_CLIENT
    return Route.LOCAL
