// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>

namespace ssmalign {

/// Axis-aligned box in continuous pixel coordinates, corners (x0,y0)-(x1,y1).
struct Box {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
    bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

inline double iou(const Box& a, const Box& b) {
    const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

struct GtObject {
    Box box;
    int cls = 0;
};

struct Detection {
    Box box;
    int cls = 0;
    double conf = 0.0;
};

}  // namespace ssmalign
