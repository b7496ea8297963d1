// training.hpp - patient-specific optimization: smooth-L1 objective, AdamW,
// warm-up + cosine learning-rate schedule.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "kv2ct/grss.hpp"
#include "kv2ct/model.hpp"

namespace kv2ct {

struct TrainConfig {
    int epochs = 400;
    int batch_size = 8;
    double lr_peak = 5e-4;
    double lr_init = 1e-7;
    int warmup_epochs = 20;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double smooth_l1_beta = 1.0;  // knee, in normalized units
    std::uint64_t seed = 1;

    void validate() const;
};

// Mean smooth-L1 over flat buffers: 0.5 e^2/beta below the knee, |e|-0.5 beta
// above. If grad is non-null it receives d(loss)/d(pred).
template <typename T>
double smooth_l1(const std::vector<T>& pred, const std::vector<T>& target, double beta,
                 std::vector<T>* grad = nullptr);

// Volume overload (raw values; beta in the same unit as the volumes).
double smooth_l1(const Volume3D& pred, const Volume3D& target, double beta);

// Linear ramp lr_init -> lr_peak over warmup_epochs, then cosine decay
// lr_peak -> 0 over the remaining epochs.
double lr_schedule(int epoch, const TrainConfig& cfg);

// AdamW with bias-corrected moments and decoupled weight decay. Moments are
// kept in double regardless of the parameter type.
template <typename T>
class AdamW {
  public:
    AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8);

    // params/grads must present the same tensor layout on every call.
    void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>*>& grads,
              double lr);
    std::int64_t steps() const { return t_; }

  private:
    double b1_, b2_, wd_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

template <typename T>
std::vector<Tensor<T>*> raw_tensors(ModelParams<T>& p);

struct LossCurvePoint {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<LossCurvePoint> curve;
    double best_loss = 0.0;
    int best_epoch = -1;
};

// Trains net in place. If checkpoint_stem is nonempty, the parameters with
// the best epoch-mean loss seen so far are saved there after every improving
// epoch. If log is non-null, one progress line per epoch is written to it.
template <typename T>
TrainResult train(Net<T>& net, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                  const std::string& checkpoint_stem = "", std::ostream* log = nullptr);

void write_loss_curve(const std::string& path, const std::vector<LossCurvePoint>& curve);

}  // namespace kv2ct
