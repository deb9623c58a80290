"""坐标计算 - 等距圆柱投影近似，城市尺度足够"""

import math
from typing import Tuple

EARTH_RADIUS_M = 6371008.8
_DEG = math.pi / 180.0


def meters_per_degree(lat0: float) -> Tuple[float, float]:
    """返回 (每经度米数, 每纬度米数)，经度按 cos(lat0) 缩放"""
    m_lat = EARTH_RADIUS_M * _DEG
    return m_lat * math.cos(lat0 * _DEG), m_lat


def offset_degrees(lon: float, lat: float, dx_m: float, dy_m: float, lat0: float) -> Tuple[float, float]:
    """在 (lon, lat) 上平移 dx/dy 米"""
    mx, my = meters_per_degree(lat0)
    return lon + dx_m / mx, lat + dy_m / my


def distance_m(lon1: float, lat1: float, lon2: float, lat2: float) -> float:
    """两点距离（米），以两点平均纬度缩放经度"""
    mx, my = meters_per_degree((lat1 + lat2) / 2.0)
    return math.hypot((lon2 - lon1) * mx, (lat2 - lat1) * my)


def speed_mps(lon1: float, lat1: float, t1: int, lon2: float, lat2: float, t2: int) -> float:
    dt = t2 - t1
    if dt <= 0:
        return math.inf
    return distance_m(lon1, lat1, lon2, lat2) / dt


def point_segment_distance(px: float, py: float, ax: float, ay: float,
                           bx: float, by: float) -> Tuple[float, float, float]:
    """点到线段的距离（局部米坐标），投影参数截断到 [0,1]；返回 (距离, 投影x, 投影y)"""
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    u = 0.0 if denom == 0 else max(0.0, min(1.0, ((px - ax) * vx + (py - ay) * vy) / denom))
    qx, qy = ax + u * vx, ay + u * vy
    return math.hypot(px - qx, py - qy), qx, qy
