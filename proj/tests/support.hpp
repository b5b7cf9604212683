#pragma once

#include "protoalign/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace testsupport {

using protoalign::Mat;
using protoalign::Rng;

inline Mat random_mat(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * protoalign::standard_normal(rng);
    return m;
}

// Central differences of f with respect to every entry of x (x is restored).
inline Mat fd_gradient(const std::function<double()>& f, Mat& x, double h = 1e-6) {
    Mat g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double keep = x.data()[i];
        x.data()[i] = keep + h;
        const double up = f();
        x.data()[i] = keep - h;
        const double down = f();
        x.data()[i] = keep;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

// Norm-wise relative error; zero when both sides are exactly zero.
template <typename A, typename B>
double rel_error(const A& analytic, const B& numeric) {
    const double denom = std::max(analytic.norm(), numeric.norm());
    if (denom == 0) return 0;
    return (analytic - numeric).norm() / denom;
}

}  // namespace testsupport
