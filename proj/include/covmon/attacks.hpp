#pragma once

#include <optional>
#include <random>

#include "covmon/grad.hpp"
#include "covmon/model.hpp"

namespace covmon {

enum class AttackMethod { kFgsm, kPgd, kBim, kCw, kOod, kPatch, kSignature };

const char* attack_name(AttackMethod method);

struct PatchRect {
    int y = 0, x = 0, height = 8, width = 8;
};

// The CW objective places the fixed coefficient c on the margin term in its
// canonical form; the distortion-weighted form moves it onto the L2 term.
enum class CwObjective { kCanonical, kDistortionWeighted };

struct AttackConfig {
    AttackMethod method = AttackMethod::kFgsm;
    double epsilon = 0.1;  // L-inf budget (step size for patch/ood)
    double alpha = 0.01;   // per-iteration step where iterative
    int iterations = 1;
    double gamma = 0.0;  // signature-attack balance in [0,1]
    int target_label = -1;
    PatchRect patch;
    double wrong_score_threshold = 0.8;
    bool random_start = false;
    // CW specifics
    double cw_c = 1e-4;
    double cw_kappa = 0.0;
    double cw_lr = 0.01;
    CwObjective cw_objective = CwObjective::kCanonical;
    bool cw_keep_final = false;  // keep the final iterate instead of the nearest success
};

struct AdversarialSample {
    Tensor image;
    int source_index = -1;
    int source_label = -1;
    int predicted = -1;
    float score = 0.0f;
    AttackMethod method = AttackMethod::kFgsm;
    bool success = false;  // method-specific success marker
};

AdversarialSample fgsm(const NetworkModel& model, const Tensor& x, int label, double epsilon);

AdversarialSample pgd(const NetworkModel& model, const Tensor& x, int label, double epsilon,
                      double alpha, int iterations, bool random_start = false,
                      uint64_t seed = 0);

AdversarialSample bim(const NetworkModel& model, const Tensor& x, int label, double epsilon,
                      double alpha, int iterations);

// L2 tanh-space Carlini-Wagner with fixed c and kappa (no binary search).
// Success marker means a misclassified iterate was found; the returned image
// is the lowest-distortion successful iterate unless cw_keep_final is set.
AdversarialSample cw(const NetworkModel& model, const Tensor& x, int label, int iterations,
                     double c = 1e-4, double kappa = 0.0, double lr = 0.01,
                     CwObjective objective = CwObjective::kCanonical, bool keep_final = false);

// Multi-step targeted FGSM with decaying steps eps/1, eps/4, eps/9, ...;
// stops early once the target class score reaches 0.99.
AdversarialSample ood_targeted(const NetworkModel& model, const Tensor& x, int target_label,
                               double epsilon, int iterations, double stop_score = 0.99);

// Gradient ascent restricted to the patch pixels (raw gradient scaled by
// epsilon per iteration); pixels outside the patch are untouched.
AdversarialSample patch_attack(const NetworkModel& model, const Tensor& x, int label,
                               double epsilon, int iterations, PatchRect patch = {});

// Summed hinge penalties for activations outside the SRC ranges of class
// `predicted`, plus the tap-level subgradient seeds.
struct SignatureLossValue {
    double loss = 0.0;
    std::vector<TapSeed> seeds;
};
SignatureLossValue signature_loss(const ActiveState& active, const SrcSignature& sig,
                                  int predicted);

// Signature-Attack: PGD-style iteration on the blended gradient
// (1-gamma)*grad(L_CE)/|..|_2 - gamma*grad(L_S)/|..|_2; a zero-norm term is
// dropped for that step.
AdversarialSample signature_attack(const NetworkModel& model, const SrcSignature& sig,
                                   const Tensor& x, double epsilon, double alpha, int iterations,
                                   double gamma);

struct DetectorResult {
    bool unsafe = false;
    double divergence = 0.0;
};

double kl_divergence(const Tensor& p, const Tensor& q);

// min of the two directed KL divergences between f(x) and f(compressed x)
double vision_guard_divergence(const NetworkModel& model, const Tensor& x, int jpeg_quality = 50);
DetectorResult vision_guard_detect(const NetworkModel& model, const Tensor& x, double tau_vg,
                                   int jpeg_quality = 50);

// max over {bit-depth squeeze, median smooth} of |f(x) - f(squeezed)|_1
double feature_squeezing_divergence(const NetworkModel& model, const Tensor& x, int bits = 1,
                                    int window = 2);
DetectorResult feature_squeezing_detect(const NetworkModel& model, const Tensor& x, double tau_fs,
                                        int bits = 1, int window = 2);

}  // namespace covmon
