#ifndef UFM_KERNEL_HPP
#define UFM_KERNEL_HPP

#include <cmath>
#include <numbers>
#include <vector>

#include "ufm/error.hpp"

namespace ufm {

/// Gaussian-based kernel of even order gamma:
///   k(z) = (sum_i c_{2i} z^{2i}) phi(z),  i = 0 .. gamma/2 - 1,
/// with c_{2i} = (-1)^i 2^{i-(gamma-1)} gamma! / ((gamma/2)! (2i+1)! (gamma/2-1-i)!).
/// Order 2 is the standard normal density; order 14 has c_{2i} =
/// (-1)^i 2^{i-13} 14! / (7! (2i+1)! (6-i)!).
///
/// The CDF K and the partial first moment J(z) = int_{-inf}^z v k(v) dv are
/// closed form. Unrolling int z^n phi = -z^{n-1} phi + (n-1) int z^{n-2} phi
/// gives K(z) = a Phi(z) - phi(z) Q(z) and J(z) = -phi(z) R(z) for fixed
/// polynomials Q (odd) and R (even), evaluated by Horner's rule.
template <typename Scalar = double>
class SmoothKernel {
 public:
  struct Eval {
    Scalar cdf;           // K(z)
    Scalar density;       // k(z)
    Scalar partial_mean;  // J(z)
  };

  static SmoothKernel gaussian(int order) {
    if (order < 2 || order % 2 != 0)
      throw UfmError(ErrorCode::InvalidArgument, "kernel order must be even and >= 2");
    return SmoothKernel(order);
  }

  int order() const { return order_; }
  /// c_0, c_2, ..., c_{gamma-2}.
  const std::vector<Scalar>& coefficients() const { return coeffs_; }
  /// sup_z |k(z)|, located on a fine scan.
  Scalar sup_density() const { return sup_density_; }

  Scalar density(Scalar z) const { return even_poly(density_poly_, z) * phi(z); }

  Scalar cdf(Scalar z) const {
    return cdf_gauss_weight_ * big_phi(z) - phi(z) * odd_poly(cdf_poly_, z);
  }

  Scalar partial_mean(Scalar z) const { return -phi(z) * even_poly(mean_poly_, z); }

  /// K, k and J at one point, sharing the exp/erfc evaluations.
  Eval evaluate(Scalar z) const {
    const Scalar p = phi(z);
    const Scalar z2 = z * z;
    return {cdf_gauss_weight_ * big_phi(z) - p * z * horner(cdf_poly_, z2),
            p * horner(density_poly_, z2), -p * horner(mean_poly_, z2)};
  }

 private:
  explicit SmoothKernel(int order) : order_(order) {
    const int s = order / 2;
    coeffs_.resize(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) {
      // log-gamma keeps the factorial ratios exact enough for any order used here.
      const double mag = std::exp((i - (order - 1)) * std::log(2.0) + std::lgamma(order + 1.0) -
                                  std::lgamma(s + 1.0) - std::lgamma(2.0 * i + 2.0) -
                                  std::lgamma(static_cast<double>(s - i)));
      coeffs_[static_cast<std::size_t>(i)] = static_cast<Scalar>(i % 2 == 0 ? mag : -mag);
    }
    density_poly_ = coeffs_;

    // q_n(z): int_{-inf}^z v^n phi = (n-1)!! Phi(z) - phi(z) q_n(z) for even n, with
    // q_0 = 0, q_n = z^{n-1} + (n-1) q_{n-2}. Stored in powers of z (odd powers only).
    // p_n(z): int_{-inf}^z v^n phi = -phi(z) p_n(z) for odd n, p_1 = 1,
    // p_n = z^{n-1} + (n-1) p_{n-2}.
    const int deg = order;  // upper bound on polynomial degree
    std::vector<Scalar> q_prev(static_cast<std::size_t>(deg + 1), Scalar(0));
    std::vector<Scalar> p_prev(static_cast<std::size_t>(deg + 1), Scalar(0));
    p_prev[0] = Scalar(1);
    std::vector<Scalar> q_total(static_cast<std::size_t>(deg + 1), Scalar(0));
    std::vector<Scalar> p_total(static_cast<std::size_t>(deg + 1), Scalar(0));
    Scalar double_fact = Scalar(1);  // (n-1)!! for even n
    cdf_gauss_weight_ = Scalar(0);
    for (int i = 0; i < s; ++i) {
      const int n = 2 * i;
      const Scalar c = coeffs_[static_cast<std::size_t>(i)];
      if (n > 0) {
        std::vector<Scalar> q(static_cast<std::size_t>(deg + 1), Scalar(0));
        for (int k = 0; k <= deg; ++k) q[static_cast<std::size_t>(k)] = Scalar(n - 1) * q_prev[static_cast<std::size_t>(k)];
        q[static_cast<std::size_t>(n - 1)] += Scalar(1);
        q_prev = q;
        double_fact *= Scalar(n - 1);

        std::vector<Scalar> p(static_cast<std::size_t>(deg + 1), Scalar(0));
        for (int k = 0; k <= deg; ++k) p[static_cast<std::size_t>(k)] = Scalar(n) * p_prev[static_cast<std::size_t>(k)];
        p[static_cast<std::size_t>(n)] += Scalar(1);
        p_prev = p;
      }
      cdf_gauss_weight_ += c * double_fact;
      for (int k = 0; k <= deg; ++k) {
        q_total[static_cast<std::size_t>(k)] += c * q_prev[static_cast<std::size_t>(k)];
        p_total[static_cast<std::size_t>(k)] += c * p_prev[static_cast<std::size_t>(k)];
      }
    }
    // The sum above is the kernel's mass, exactly 1; drop its rounding error.
    if (std::abs(cdf_gauss_weight_ - Scalar(1)) > Scalar(1e-6))
      throw UfmError(ErrorCode::InvalidArgument, "kernel coefficients do not integrate to 1");
    cdf_gauss_weight_ = Scalar(1);
    // Q is odd: keep coefficients of z^1, z^3, ... as a polynomial in z^2.
    for (int k = 1; k <= deg; k += 2) cdf_poly_.push_back(q_total[static_cast<std::size_t>(k)]);
    for (int k = 0; k <= deg; k += 2) mean_poly_.push_back(p_total[static_cast<std::size_t>(k)]);

    sup_density_ = Scalar(0);
    for (int j = 0; j <= 6000; ++j) {
      const Scalar z = Scalar(j) * Scalar(0.002);
      sup_density_ = std::max(sup_density_, std::abs(density(z)));
    }
  }

  static Scalar phi(Scalar z) {
    return std::exp(Scalar(-0.5) * z * z) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
  }
  static Scalar big_phi(Scalar z) {
    return Scalar(0.5) * std::erfc(-z / std::numbers::sqrt2_v<Scalar>);
  }
  static Scalar horner(const std::vector<Scalar>& c, Scalar x) {
    Scalar acc = Scalar(0);
    for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * x + *it;
    return acc;
  }
  static Scalar even_poly(const std::vector<Scalar>& c, Scalar z) { return horner(c, z * z); }
  static Scalar odd_poly(const std::vector<Scalar>& c, Scalar z) { return z * horner(c, z * z); }

  int order_;
  std::vector<Scalar> coeffs_;
  std::vector<Scalar> density_poly_;
  std::vector<Scalar> cdf_poly_;
  std::vector<Scalar> mean_poly_;
  Scalar cdf_gauss_weight_ = Scalar(1);
  Scalar sup_density_ = Scalar(0);
};

template <typename Scalar>
Scalar kernel_k(const SmoothKernel<Scalar>& kernel, Scalar z) {
  return kernel.density(z);
}

template <typename Scalar>
Scalar kernel_cdf(const SmoothKernel<Scalar>& kernel, Scalar z) {
  return kernel.cdf(z);
}

/// d/dc of the smoothed check loss at fitted value c: K((c - y)/h) - tau.
template <typename Scalar>
Scalar smoothed_grad(const SmoothKernel<Scalar>& kernel, Scalar h, Scalar tau, Scalar c, Scalar y) {
  return kernel.cdf((c - y) / h) - tau;
}

/// d^2/dc^2 of the smoothed check loss: k((c - y)/h) / h. Can be negative
/// for kernels of order above two.
template <typename Scalar>
Scalar smoothed_hess(const SmoothKernel<Scalar>& kernel, Scalar h, Scalar /*tau*/, Scalar c,
                     Scalar y) {
  return kernel.density((c - y) / h) / h;
}

/// (1/h) int rho_tau(s) k((s - (y - c))/h) ds in closed form. With
/// z = (c - y)/h this is h [z (K(z) - tau) - J(z)].
template <typename Scalar>
Scalar smoothed_value(const SmoothKernel<Scalar>& kernel, Scalar h, Scalar tau, Scalar c, Scalar y) {
  const Scalar z = (c - y) / h;
  const auto e = kernel.evaluate(z);
  return h * (z * (e.cdf - tau) - e.partial_mean);
}

}  // namespace ufm

#endif  // UFM_KERNEL_HPP
