#pragma once

#include <algorithm>
#include <vector>

#include "bubbles/bubble.hpp"
#include "bubbles/domain.hpp"

namespace bubbles {

// First-order expansions of the H^1_0 projections.  The domain stores the
// regular part H normalized against Gamma = (4 pi^2 |z|^2)^{-1}; the bubble
// tail is alpha*delta*|z|^{-2}, so the boundary-matching correction carries
// the conversion factor 4 pi^2:
//   P U      =  U     - alpha * 4pi^2 * delta * H(x, xi)        + O(delta^3)
//   P psi^0  =  psi^0 - alpha * 4pi^2 *         H(x, xi)        + O(delta^2)
//   P psi^l  =  psi^l - alpha * 4pi^2 * delta * d_xi_l H(x, xi) + O(delta^3)
// The projected bubble is clamped to [0, U] (maximum principle).

inline double projection_correction(const DomainModel& dom, const Point4& x, const Point4& xi) {
    return kAlpha * kGamma4 * dom.regular_part(x, xi);
}

inline double projected_bubble(const Bubble& b, const DomainModel& dom, const Point4& x,
                               int order = 1) {
    if (!dom.contains(x)) throw PointOutsideDomain("projected_bubble");
    const double u = b(x);
    double correction;
    if (order == 3) {
        // verification path: solve the harmonic defect on a grid
        auto solver = detail::GridLaplace(
            [&dom](const Point4& p) { return dom.contains(p); }, dom.bounding_corner(),
            dom.bounding_extent(), 16);
        auto field = solver.solve([&b](const Point4& p) { return b(p); });
        correction = solver.interpolate(field, x);
    } else {
        correction = b.delta * projection_correction(dom, x, b.xi);
    }
    return std::clamp(u - correction, 0.0, u);
}

inline double projected_kernel(const KernelFunction& k, const DomainModel& dom, const Point4& x) {
    if (!dom.contains(x)) throw PointOutsideDomain("projected_kernel");
    const double psi = k(x);
    const Point4& xi = k.bubble.xi;
    if (k.index == 0) return psi - projection_correction(dom, x, xi);
    const double h = 1e-6 * dom.diameter();
    Point4 xp = xi, xm = xi;
    xp[k.index - 1] += h;
    xm[k.index - 1] -= h;
    double dH = (dom.regular_part(x, xp) - dom.regular_part(x, xm)) / (2.0 * h);
    return psi - kAlpha * kGamma4 * k.bubble.delta * dH;
}

// Field variants: evaluate the projection at many nodes for one (delta, xi).
// Grid domains then need a single harmonic solve for the whole node set.

inline std::vector<double> regular_part_field(const DomainModel& dom,
                                              const std::vector<Point4>& nodes,
                                              const Point4& xi) {
    return dom.regular_part_many(nodes, xi);
}

inline std::vector<double> projected_bubble_field(const Bubble& b, const DomainModel& dom,
                                                  const std::vector<Point4>& nodes) {
    std::vector<double> H = regular_part_field(dom, nodes, b.xi);
    std::vector<double> out(nodes.size());
    for (std::size_t n = 0; n < nodes.size(); ++n) {
        double u = b(nodes[n]);
        out[n] = std::clamp(u - kAlpha * kGamma4 * b.delta * H[n], 0.0, u);
    }
    return out;
}

inline std::vector<double> projected_kernel_field(const KernelFunction& k, const DomainModel& dom,
                                                  const std::vector<Point4>& nodes) {
    std::vector<double> out(nodes.size());
    if (k.index == 0) {
        std::vector<double> H = regular_part_field(dom, nodes, k.bubble.xi);
        for (std::size_t n = 0; n < nodes.size(); ++n)
            out[n] = k(nodes[n]) - kAlpha * kGamma4 * H[n];
        return out;
    }
    std::vector<double> H;
    std::vector<Eigen::Vector4d> dH;
    dom.regular_part_and_grad_many(nodes, k.bubble.xi, H, dH);
    for (std::size_t n = 0; n < nodes.size(); ++n)
        out[n] = k(nodes[n]) - kAlpha * kGamma4 * k.bubble.delta * dH[n][k.index - 1];
    return out;
}

} // namespace bubbles
