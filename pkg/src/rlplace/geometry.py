"""Small planar geometry helpers: angle wrapping, box corners, convex clipping."""

import math

import numpy as np


def wrap_angle(angle):
    """Map an angle (radians) into [-pi, pi)."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    wrapped -= math.pi
    # fmod can land exactly on +pi after the shift for inputs like -pi - tiny
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def rotation_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def bev_corners(cx, cy, hx, hy, yaw):
    """Counter-clockwise BEV corners of a yawed rectangle, shape (4, 2)."""
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly):
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x = np.asarray(poly)[:, 0]
    y = np.asarray(poly)[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clipper):
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clipper``.

    Both polygons are sequences of (x, y). Returns the intersection polygon as
    a list of vertices (possibly empty).
    """
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for k in range(n):
        if not output:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs = output
        output = []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    output.append(_segment_cross(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0.0:
                output.append(_segment_cross(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _segment_cross(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))
