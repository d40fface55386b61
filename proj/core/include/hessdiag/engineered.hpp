#pragma once

#include <string>
#include <vector>

#include "hessdiag/linalg.hpp"
#include "hessdiag/models.hpp"

namespace hessdiag {

// Hand-built objectives with known curvature, packaged as models so the
// diagnosis pipeline runs on them unchanged. They ignore the batch contents
// and have no logits.

struct BlockSpec {
  std::string name;  // registry group; kOtherGroup for untagged coordinates
  std::size_t size = 0;
};

// L = 1/2 theta^T A theta, theta laid out block by block in `blocks` order.
// A must be square with side equal to the summed block sizes.
Model quadratic_model(const DenseMatrix& a, const std::vector<BlockSpec>& blocks, FlatVector theta = {});

// One group sits on top of a double well: per coordinate -a/2 x^2 + b/4 x^4,
// evaluated at x = 0 where the Hessian is -a I. The control group is the bowl
// c/2 y^2. Large b makes the fragile group blow up under perturbation.
struct FragileSpec {
  std::size_t fragile_dim = 8;
  std::size_t control_dim = 8;
  double a = 1.0;
  double b = 1e5;
  double c = 1.0;
  std::string fragile_group = "fragile_attention";
  std::string control_group = "control_attention";
};
Model fragile_model(const FragileSpec& spec = {});

// Source group w feeds the sink group s through the bottleneck w*w:
// L = 1/2 ||s - w*w||^2 + mu/2 ||w - w0||^2, started at w = w0, s = s0.
// While s overshoots w*w the residual softens the w block and the w-s
// coupling is strong; letting s catch up weakens it.
struct CoupledSpec {
  std::vector<double> w0 = {1.0, 0.8};
  std::vector<double> s0 = {2.0, 1.5};
  double mu = 4.0;
  std::string source_group = "source_attention";
  std::string sink_group = "sink_attention";
};
Model coupled_model(const CoupledSpec& spec = {});

// A dummy batch for objectives that ignore their input.
std::vector<Example> placeholder_batch(std::size_t n);

}  // namespace hessdiag
