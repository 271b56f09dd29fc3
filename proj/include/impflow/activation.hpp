#pragma once

// 1-Lipschitz activations and their derivatives.
//   ReLU      max(0,x), subgradient 0 at x=0
//   LipSwish  x*sigmoid(x)/1.1
//   Sine      sin(2*pi*x)/(2*pi)

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace impflow {

enum class ActivationKind { ReLU, LipSwish, Sine };

inline const char* to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::LipSwish: return "lipswish";
    case ActivationKind::Sine: return "sine";
  }
  return "?";
}

inline ActivationKind activation_from_string(const std::string& s) {
  if (s == "relu") return ActivationKind::ReLU;
  if (s == "lipswish") return ActivationKind::LipSwish;
  if (s == "sine") return ActivationKind::Sine;
  throw std::invalid_argument("unknown activation: " + s);
}

/// k-th derivative of the activation at x, for order in {0,1,2,3}.
inline double activation_eval(ActivationKind kind, double x, int order) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (kind) {
    case ActivationKind::ReLU:
      if (order == 0) return x > 0 ? x : 0.0;
      if (order == 1) return x > 0 ? 1.0 : 0.0;
      return 0.0;
    case ActivationKind::LipSwish: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      const double sp = s * (1.0 - s);
      switch (order) {
        case 0: return x * s / 1.1;
        case 1: return (s + x * sp) / 1.1;
        case 2: return sp * (2.0 + x * (1.0 - 2.0 * s)) / 1.1;
        case 3: {
          // d/dx [sp*(2 + x(1-2s))]
          const double spp = sp * (1.0 - 2.0 * s);
          return (spp * (2.0 + x * (1.0 - 2.0 * s)) + sp * ((1.0 - 2.0 * s) - 2.0 * x * sp)) / 1.1;
        }
      }
      break;
    }
    case ActivationKind::Sine:
      switch (order) {
        case 0: return std::sin(two_pi * x) / two_pi;
        case 1: return std::cos(two_pi * x);
        case 2: return -two_pi * std::sin(two_pi * x);
        case 3: return -two_pi * two_pi * std::cos(two_pi * x);
      }
      break;
  }
  throw std::invalid_argument("activation_eval: order must be in {0,1,2,3}");
}

}  // namespace impflow
