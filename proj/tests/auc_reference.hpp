#pragma once

#include <Eigen/Core>

namespace nrr::test {

// (concordant + 0.5 ties) / pairs, by explicit double loop.
inline double pairwise_auc(const Eigen::VectorXd& s, const Eigen::VectorXd& y)
{
    double num = 0, pairs = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        for (Eigen::Index j = 0; j < s.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            pairs += 1;
            if (s[i] > s[j]) num += 1;
            else if (s[i] == s[j]) num += 0.5;
        }
    return num / pairs;
}

}  // namespace nrr::test
