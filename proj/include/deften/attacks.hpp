#pragma once

#include "deften/dataset.hpp"
#include "deften/nn.hpp"

#include <functional>
#include <iosfwd>
#include <string>

namespace deften {

struct AttackConfig {
    double epsilon = 0.0;    // l-inf radius, in input units
    double step_size = 0.0;  // per-iteration step, in input units
    Index iterations = 1;
    bool random_start = false;
    double pixel_low = 0.0, pixel_high = 1.0;  // valid input range (clipping set)
    Index eot_samples = 1;                     // randomized passes per bpda gradient
    // How the model is queried per gradient: Deterministic for plain white-box,
    // Randomized to attack a stochastic model through fresh draws.
    LayerMode mode = LayerMode::Deterministic;
};

struct AttackResult {
    Tensord x_adv;
    Tensord delta;  // x_adv - x
    bool success = false;  // post-attack prediction differs from the label
    Index forward_queries = 0, backward_queries = 0;
};

// Gets told every accepted iterate (random start, each projected step, and the
// final point), so feasibility invariants are checkable from outside.
struct AttackObserver {
    virtual ~AttackObserver() = default;
    virtual void on_iterate(const Tensord& x_adv, const Tensord& delta) = 0;
};

// Elementwise gradient-step sign with sgn(0) = 0, so coordinates the loss does
// not depend on are left untouched.
Tensord attack_sign(const Tensord& g);

// d(loss)/d(input) through one forward in the given mode. Parameter gradients
// are left untouched.
Tensord input_gradient(Model& model, const Tensord& x, Index label, LayerMode mode,
                       Rng* rng = nullptr, double* loss_out = nullptr);

// Clamp candidate into the l-inf ball of cfg.epsilon around x intersected with
// the pixel bounds.
Tensord project_linf(const Tensord& candidate, const Tensord& x, const AttackConfig& cfg);

struct IterationSchedule {
    double step_size = 1.0;  // in 0-255 image units
    Index iterations = 0;
};

// floor(min(eps+4, 1.25*eps)) iterations of unit steps, for eps in 0-255 units.
IterationSchedule iteration_schedule(double epsilon_255);

// The standard iterative setup for images: epsilon_255/255 ball, 1/255 steps,
// iteration count from the schedule, pixel bounds [0, 1].
AttackConfig scheduled_config(double epsilon_255);

AttackResult fgsm(Model& model, const Tensord& x, Index label, const AttackConfig& cfg,
                  Rng* rng = nullptr, AttackObserver* observer = nullptr);

// Iterated signed steps with per-step projection; no random start.
AttackResult bim(Model& model, const Tensord& x, Index label, const AttackConfig& cfg,
                 Rng* rng = nullptr, AttackObserver* observer = nullptr);

// bim prepended with a uniform random start inside the ball when cfg asks.
AttackResult pgd(Model& model, const Tensord& x, Index label, const AttackConfig& cfg,
                 Rng* rng = nullptr, AttackObserver* observer = nullptr);

// Sum (not mean; sign steps make the scale irrelevant) of input gradients over
// k independent randomized forward passes.
Tensord eot_gradient(Model& model, const Tensord& x, Index label, Index k, Rng& rng);

// pgd whose step direction is the sign of the eot gradient over
// cfg.eot_samples randomized passes; the standard adaptive attack against the
// dropout defense.
AttackResult bpda_pgd(Model& model, const Tensord& x, Index label, const AttackConfig& cfg,
                      Rng& rng, AttackObserver* observer = nullptr);

using AttackFn = std::function<AttackResult(Model&, const Tensord&, Index)>;

// Generates adversarial examples against source and scores them on target;
// returns target accuracy in percent. eval_opts controls how target predicts.
double transfer_attack(Model& source, Model& target, const AttackFn& attack,
                       const Dataset& examples, const ForwardOptions& eval_opts = {},
                       Rng* eval_rng = nullptr);

// One json object per attacked example, written as a single line.
struct AttackRecord {
    Index index = 0;
    double epsilon = 0.0;
    std::string attack;
    bool success = false;
    Index queries = 0;  // forward + backward
    double linf_delta = 0.0;
};

AttackRecord make_record(Index index, double epsilon, const std::string& attack,
                         const AttackResult& result);
void append_record(std::ostream& os, const AttackRecord& record);
AttackRecord parse_record(const std::string& line);

}  // namespace deften
