#include "kv2ct/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

namespace kv2ct {

void TrainConfig::validate() const {
    if (epochs <= 0) throw ConfigError("train: epochs must be positive");
    if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
        throw ConfigError("train: warmup_epochs (" + std::to_string(warmup_epochs) +
                          ") must be in [0, epochs)");
    if (!(beta1 > 0 && beta1 < beta2 && beta2 < 1))
        throw ConfigError("train: need 0 < beta1 < beta2 < 1");
    if (lr_peak < 0 || lr_init < 0) throw ConfigError("train: learning rates must be >= 0");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    if (smooth_l1_beta <= 0) throw ConfigError("train: smooth_l1_beta must be positive");
}

template <typename T>
double smooth_l1(const std::vector<T>& pred, const std::vector<T>& target, double beta,
                 std::vector<T>* grad) {
    if (pred.size() != target.size())
        throw ShapeError("smooth_l1: size mismatch (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(target.size()) + ")");
    if (pred.empty()) throw ShapeError("smooth_l1: empty input");
    if (beta <= 0) throw ConfigError("smooth_l1: beta must be positive");
    const double inv_n = 1.0 / double(pred.size());
    if (grad) grad->assign(pred.size(), T(0));
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = double(pred[i]) - double(target[i]);
        const double a = std::abs(e);
        double g;
        if (a < beta) {
            acc += 0.5 * e * e / beta;
            g = e / beta;
        } else {
            acc += a - 0.5 * beta;
            g = e > 0 ? 1.0 : -1.0;
        }
        if (grad) (*grad)[i] = T(g * inv_n);
    }
    return acc * inv_n;
}

double smooth_l1(const Volume3D& pred, const Volume3D& target, double beta) {
    pred.require_same_grid(target, "smooth_l1");
    return smooth_l1<float>(pred.data, target.data, beta, nullptr);
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.epochs)
        throw ConfigError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(cfg.epochs) + ")");
    if (epoch < cfg.warmup_epochs)
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * double(epoch) / cfg.warmup_epochs;
    const double t = double(epoch - cfg.warmup_epochs) / double(cfg.epochs - cfg.warmup_epochs);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(M_PI * t));
}

template <typename T>
AdamW<T>::AdamW(double beta1, double beta2, double weight_decay, double eps)
    : b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {}

template <typename T>
void AdamW<T>::step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>*>& grads,
                    double lr) {
    if (params.size() != grads.size()) throw ShapeError("adamw: params/grads tensor count mismatch");
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(std::size_t(params[i]->size()), 0.0);
            v_[i].assign(std::size_t(params[i]->size()), 0.0);
        }
    }
    if (m_.size() != params.size()) throw ShapeError("adamw: tensor layout changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->v;
        const auto& g = grads[i]->v;
        if (p.size() != m_[i].size() || g.size() != p.size())
            throw ShapeError("adamw: tensor size changed between steps");
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = double(g[k]);
            m[k] = b1_ * m[k] + (1.0 - b1_) * gk;
            v[k] = b2_ * v[k] + (1.0 - b2_) * gk * gk;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            const double upd = mhat / (std::sqrt(vhat) + eps_) + wd_ * double(p[k]);
            p[k] = T(double(p[k]) - lr * upd);
        }
    }
}

template <typename T>
std::vector<Tensor<T>*> raw_tensors(ModelParams<T>& p) {
    std::vector<Tensor<T>*> out;
    for (auto& [name, t] : tensor_list(p)) out.push_back(t);
    return out;
}

template <typename T>
TrainResult train(Net<T>& net, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                  const std::string& checkpoint_stem, std::ostream* log) {
    cfg.validate();
    if (pairs.empty()) throw ConfigError("train: no training pairs");
    for (const auto& pr : pairs)
        if (pr.model_tag != net.config().model_tag)
            throw ConfigError("train: pair tagged '" + pr.model_tag + "' fed to '" +
                              net.config().model_tag + "' model");

    const std::size_t n = pairs.size();
    std::vector<std::vector<T>> inputs(n), targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        inputs[i] = pack_kv_input<T>(net.config(), pairs[i].kv_ap, pairs[i].kv_lat);
        targets[i] = pack_ct_target<T>(net.config(), pairs[i].ct);
    }

    AdamW<T> opt(cfg.beta1, cfg.beta2, cfg.weight_decay);
    auto ptensors = raw_tensors(net.params());
    auto gtensors = raw_tensors(net.grads());

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::vector<double> sample_loss(n, 0.0);
    std::vector<T> dout;

    TrainResult res;
    res.best_loss = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        std::shuffle(order.begin(), order.end(), rng);
        std::size_t pos = 0;
        int batch = 0;
        while (pos < n) {
            const std::size_t bn = std::min(std::size_t(cfg.batch_size), n - pos);
            net.zero_grad();
            double batch_loss = 0.0;
            for (std::size_t b = 0; b < bn; ++b) {
                const std::size_t si = order[pos + b];
                const auto& out = net.forward(inputs[si]);
                const double l =
                    smooth_l1(out, targets[si], cfg.smooth_l1_beta, &dout);
                for (auto& gv : dout) gv = T(double(gv) / double(bn));
                net.backward(dout);
                sample_loss[si] = l;
                batch_loss += l / double(bn);
            }
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss in epoch " + std::to_string(epoch) +
                                   " batch " + std::to_string(batch));
            opt.step(ptensors, gtensors, lr);
            pos += bn;
            ++batch;
        }
        // Sum in pair-index order so the epoch mean is shuffle-independent.
        double mean = 0.0;
        for (double l : sample_loss) mean += l;
        mean /= double(n);
        res.curve.push_back({epoch, lr, mean});
        if (mean < res.best_loss) {
            res.best_loss = mean;
            res.best_epoch = epoch;
            if (!checkpoint_stem.empty()) save_checkpoint(net, checkpoint_stem);
        }
        if (log)
            *log << "epoch " << epoch << " lr " << lr << " loss " << mean << "\n";
    }
    return res;
}

void write_loss_curve(const std::string& path, const std::vector<LossCurvePoint>& curve) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "epoch,lr,loss\n";
    char buf[96];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.9e,%.9e\n", p.epoch, p.lr, p.loss);
        f << buf;
    }
    if (!f) throw IoError("short write to " + path);
}

template double smooth_l1<float>(const std::vector<float>&, const std::vector<float>&, double,
                                 std::vector<float>*);
template double smooth_l1<double>(const std::vector<double>&, const std::vector<double>&, double,
                                  std::vector<double>*);
template class AdamW<float>;
template class AdamW<double>;
template std::vector<Tensor<float>*> raw_tensors<float>(ModelParams<float>&);
template std::vector<Tensor<double>*> raw_tensors<double>(ModelParams<double>&);
template TrainResult train<float>(Net<float>&, const std::vector<TrainingPair>&,
                                  const TrainConfig&, const std::string&, std::ostream*);
template TrainResult train<double>(Net<double>&, const std::vector<TrainingPair>&,
                                   const TrainConfig&, const std::string&, std::ostream*);

}  // namespace kv2ct
