#include "lmpc/learning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace lmpc {

namespace {

constexpr double kDegenerateVar = 1e-24;

// log-parameterization [log cv, log l_1..6, log sigma_n^2] with clamps
using Theta = Eigen::Matrix<double, 8, 1>;

Theta clamp_theta(Theta t) {
    t[0] = std::clamp(t[0], -20.0, 20.0);
    for (int d = 0; d < 6; ++d) t[1 + d] = std::clamp(t[1 + d], std::log(1e-3), std::log(1e3));
    t[7] = std::clamp(t[7], std::log(1e-10), 5.0);
    return t;
}

GpHyperparams to_hyper(const Theta& t) {
    GpHyperparams h;
    h.constant_variance = std::exp(t[0]);
    for (int d = 0; d < 6; ++d) h.length_scales[d] = std::exp(t[1 + d]);
    h.noise_variance = std::exp(t[7]);
    return h;
}

Eigen::MatrixXd gram(const std::vector<Vector6>& Z, const GpHyperparams& h) {
    const int n = static_cast<int>(Z.size());
    Eigen::MatrixXd K(n, n);
    for (int i = 0; i < n; ++i) {
        K(i, i) = h.constant_variance;
        for (int j = 0; j < i; ++j) {
            double ex = 0.0;
            for (int d = 0; d < 6; ++d) {
                const double dz = Z[size_t(i)][d] - Z[size_t(j)][d];
                ex -= dz * dz / (2.0 * h.length_scales[d] * h.length_scales[d]);
            }
            K(i, j) = K(j, i) = h.constant_variance * std::exp(ex);
        }
    }
    return K;
}

struct LmlWorkspace {
    int n{0};
    std::array<Eigen::MatrixXd, 6> sqdiff;  // per-dim squared differences

    explicit LmlWorkspace(const std::vector<Vector6>& Z) : n(static_cast<int>(Z.size())) {
        for (int d = 0; d < 6; ++d) {
            sqdiff[size_t(d)].resize(n, n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    const double dz = Z[size_t(i)][d] - Z[size_t(j)][d];
                    sqdiff[size_t(d)](i, j) = dz * dz;
                }
        }
    }

    Eigen::MatrixXd rbf(const GpHyperparams& h) const {
        Eigen::MatrixXd ex = Eigen::MatrixXd::Zero(n, n);
        for (int d = 0; d < 6; ++d)
            ex -= sqdiff[size_t(d)] / (2.0 * h.length_scales[d] * h.length_scales[d]);
        return h.constant_variance * ex.array().exp().matrix();
    }
};

// log marginal likelihood; fills grad (w.r.t. theta) when non-null
double lml(const LmlWorkspace& ws, const Eigen::VectorXd& y, const Theta& theta, Theta* grad) {
    const GpHyperparams h = to_hyper(theta);
    const int n = ws.n;
    const Eigen::MatrixXd E = ws.rbf(h);  // cv * RBF
    Eigen::MatrixXd K = E;
    K.diagonal().array() += h.noise_variance + 1e-10;
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd alpha = llt.solve(y);
    double logdet = 0.0;
    const auto& L = llt.matrixLLT();
    for (int i = 0; i < n; ++i) logdet += std::log(L(i, i));
    const double value = -0.5 * y.dot(alpha) - logdet - 0.5 * n * std::log(2.0 * M_PI);
    if (grad) {
        const Eigen::MatrixXd Kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
        const Eigen::MatrixXd A = alpha * alpha.transpose() - Kinv;
        (*grad)[0] = 0.5 * (A.array() * E.array()).sum();
        for (int d = 0; d < 6; ++d) {
            const double l2 = h.length_scales[d] * h.length_scales[d];
            (*grad)[1 + d] =
                0.5 * (A.array() * E.array() * ws.sqdiff[size_t(d)].array() / l2).sum();
        }
        (*grad)[7] = 0.5 * A.trace() * h.noise_variance;
    }
    return value;
}

}  // namespace

// multistart accept-only-improve gradient ascent; monotone per restart
GpHyperparams optimize_hyperparams(const std::vector<Vector6>& Z, const Eigen::VectorXd& y,
                                   unsigned seed, const GpTrainOptions& opts) {
    const LmlWorkspace ws(Z);
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    Theta best = clamp_theta(Theta::Zero());
    double best_val = -std::numeric_limits<double>::infinity();
    for (int start = 0; start < opts.multistarts; ++start) {
        Theta theta;
        if (start == 0) {
            theta.setZero();  // cv = 1, l = 1 on standardized data
            theta[7] = std::log(0.1);
        } else {
            theta[0] = std::log(0.5 + 1.5 * u01(rng));
            for (int d = 0; d < 6; ++d)
                theta[1 + d] = std::log(0.3) + u01(rng) * std::log(10.0);
            theta[7] = std::log(0.01) + u01(rng) * std::log(50.0);
        }
        theta = clamp_theta(theta);

        Theta grad;
        double val = lml(ws, y, theta, &grad);
        double step = 0.1;
        for (int it = 0; it < opts.max_opt_iter && step > 1e-7; ++it) {
            if (!std::isfinite(val) || grad.cwiseAbs().maxCoeff() < 1e-5) break;
            const Theta prop = clamp_theta(theta + step * grad);
            const double pv = lml(ws, y, prop, nullptr);
            if (pv > val) {
                theta = prop;
                val = lml(ws, y, theta, &grad);
                step *= 1.2;
            } else {
                step *= 0.5;
            }
        }
        if (val > best_val) {
            best_val = val;
            best = theta;
        }
    }
    return to_hyper(best);
}

MismatchDataset collect_mismatch(const std::vector<double>& time,
                                 const std::vector<FullState>& plant,
                                 const std::vector<ControlInput>& input,
                                 const VehicleParams& params, double Ts) {
    if (plant.size() < 2 || time.size() != plant.size() || input.size() + 1 < plant.size())
        throw std::invalid_argument("collect_mismatch: need >= 2 states with inputs");
    MismatchDataset out;
    out.reserve(plant.size() - 1);
    for (size_t k = 0; k + 1 < plant.size(); ++k) {
        if (std::abs(time[k + 1] - time[k] - Ts) > 0.1 * Ts) continue;  // trace gap
        const ReducedState rk = reduce_state(plant[k]);
        const Eigen::Vector4d pred = reduced_rk4_step(rk, input[k], params, Ts);
        MismatchSample s;
        s.z << rk.vec(), input[k].vec();
        s.e = reduce_state(plant[k + 1]).vec() - pred;
        if (!s.z.allFinite() || !s.e.allFinite())
            throw std::invalid_argument("collect_mismatch: non-finite trace data");
        out.push_back(s);
    }
    return out;
}

double kernel(const Vector6& a, const Vector6& b, const GpHyperparams& h) {
    double ex = 0.0;
    for (int d = 0; d < 6; ++d) {
        const double dz = a[d] - b[d];
        ex -= dz * dz / (2.0 * h.length_scales[d] * h.length_scales[d]);
    }
    double k = h.constant_variance * std::exp(ex);
    if (a == b) k += h.noise_variance;
    return k;
}

void GpModel::finalize() {
    const int n = static_cast<int>(Z_.size());
    Eigen::MatrixXd K = gram(Z_, hyper_);
    K.diagonal().array() += hyper_.noise_variance + 1e-10;
    llt_.compute(K);
    if (llt_.info() != Eigen::Success)
        throw std::runtime_error("GpModel: kernel matrix factorization failed");
    alpha_ = llt_.solve(y_);
    double logdet = 0.0;
    const auto& L = llt_.matrixLLT();
    for (int i = 0; i < n; ++i) logdet += std::log(L(i, i));
    lml_ = -0.5 * y_.dot(alpha_) - logdet - 0.5 * n * std::log(2.0 * M_PI);
}

GpModel GpModel::from_fields(const GpStandardizer& stdz, const GpHyperparams& h,
                             std::vector<Vector6> Z_std, Eigen::VectorXd y_std,
                             bool constant) {
    GpModel m;
    m.std_ = stdz;
    m.hyper_ = h;
    m.constant_ = constant;
    if (!constant) {
        m.Z_ = std::move(Z_std);
        m.y_ = std::move(y_std);
        m.finalize();
    }
    return m;
}

GpModel GpModel::fit(const std::vector<Vector6>& Z, const Eigen::VectorXd& y,
                     const GpHyperparams& h) {
    const int n = static_cast<int>(Z.size());
    if (n < 1 || y.size() != n) throw std::invalid_argument("GpModel::fit: bad data sizes");

    GpStandardizer stdz;
    stdz.z_mean.setZero();
    for (const auto& z : Z) stdz.z_mean += z;
    stdz.z_mean /= n;
    Vector6 var = Vector6::Zero();
    for (const auto& z : Z) var += (z - stdz.z_mean).cwiseAbs2();
    stdz.z_scale = (var / n).cwiseSqrt().cwiseMax(1e-8);
    stdz.y_mean = y.mean();
    const double yvar = (y.array() - stdz.y_mean).square().mean();
    if (n >= 2 && yvar <= kDegenerateVar)
        return from_fields(stdz, h, {}, {}, /*constant=*/true);
    stdz.y_scale = yvar > kDegenerateVar ? std::sqrt(yvar) : 1.0;

    std::vector<Vector6> Zs(Z.size());
    for (size_t i = 0; i < Z.size(); ++i) Zs[i] = stdz.standardize(Z[i]);
    const Eigen::VectorXd ys = (y.array() - stdz.y_mean) / stdz.y_scale;
    return from_fields(stdz, h, std::move(Zs), ys, false);
}

void GpModel::predict(const Vector6& z, double& mean, double& variance) const {
    if (!trained()) throw std::logic_error("GpModel::predict: model not trained");
    if (constant_) {
        mean = std_.y_mean;
        variance = 0.0;
        return;
    }
    const Vector6 zs = std_.standardize(z);
    const int n = static_cast<int>(Z_.size());
    Eigen::VectorXd ks(n);
    for (int i = 0; i < n; ++i) {
        double ex = 0.0;
        for (int d = 0; d < 6; ++d) {
            const double dz = zs[d] - Z_[size_t(i)][d];
            ex -= dz * dz / (2.0 * hyper_.length_scales[d] * hyper_.length_scales[d]);
        }
        ks[i] = hyper_.constant_variance * std::exp(ex);
    }
    const double mu = ks.dot(alpha_);
    const Eigen::VectorXd v = llt_.solve(ks);
    const double var_lat = std::max(0.0, hyper_.constant_variance - ks.dot(v));
    mean = std_.y_mean + std_.y_scale * mu;
    variance = std_.y_scale * std_.y_scale * var_lat;
}

void GpModel::predict_gradient(const Vector6& z, double& mean, Vector6& grad) const {
    if (!trained()) throw std::logic_error("GpModel::predict_gradient: model not trained");
    grad.setZero();
    if (constant_) {
        mean = std_.y_mean;
        return;
    }
    const Vector6 zs = std_.standardize(z);
    const int n = static_cast<int>(Z_.size());
    double mu = 0.0;
    for (int i = 0; i < n; ++i) {
        double ex = 0.0;
        for (int d = 0; d < 6; ++d) {
            const double dz = zs[d] - Z_[size_t(i)][d];
            ex -= dz * dz / (2.0 * hyper_.length_scales[d] * hyper_.length_scales[d]);
        }
        const double k = hyper_.constant_variance * std::exp(ex);
        mu += alpha_[i] * k;
        for (int d = 0; d < 6; ++d) {
            const double ls2 = hyper_.length_scales[d] * hyper_.length_scales[d];
            grad[d] -= alpha_[i] * k * (zs[d] - Z_[size_t(i)][d]) / ls2;
        }
    }
    mean = std_.y_mean + std_.y_scale * mu;
    grad = std_.y_scale * grad.cwiseQuotient(std_.z_scale);
}

std::array<GpModel, 4> train_gp(const MismatchDataset& data, unsigned split_seed,
                                const GpTrainOptions& opts, GpTrainReport* report) {
    const int n = static_cast<int>(data.size());
    if (n < 20) throw std::invalid_argument("train_gp: need at least 20 samples");

    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937 rng(split_seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    int n_train = std::max(1, static_cast<int>(std::lround(opts.train_fraction * n)));
    if (n_train >= n) n_train = n - 1;

    std::vector<int> train_idx(idx.begin(), idx.begin() + n_train);
    std::vector<int> test_idx(idx.begin() + n_train, idx.end());

    // subsample (uniform stride over the shuffled order) to bound O(n^3) cost
    auto stride_pick = [](const std::vector<int>& v, int cap) {
        if (static_cast<int>(v.size()) <= cap) return v;
        std::vector<int> out;
        out.reserve(size_t(cap));
        for (int i = 0; i < cap; ++i)
            out.push_back(v[size_t(i) * v.size() / size_t(cap)]);
        return out;
    };
    const std::vector<int> fit_idx = stride_pick(train_idx, opts.max_train_points);
    const std::vector<int> hyp_idx = stride_pick(train_idx, opts.hyperfit_subsample);

    std::array<GpModel, 4> models;
    if (report) {
        report->n_train = static_cast<int>(fit_idx.size());
        report->n_test = static_cast<int>(test_idx.size());
    }
    for (int ch = 0; ch < 4; ++ch) {
        std::vector<Vector6> Zf;
        Eigen::VectorXd yf(static_cast<int>(fit_idx.size()));
        Zf.reserve(fit_idx.size());
        for (size_t i = 0; i < fit_idx.size(); ++i) {
            Zf.push_back(data[size_t(fit_idx[i])].z);
            yf[static_cast<int>(i)] = data[size_t(fit_idx[i])].e[ch];
        }
        // hyperparameters from the standardized subsample
        GpHyperparams h;
        const double ymean = yf.mean();
        const double yvar = (yf.array() - ymean).square().mean();
        if (yvar > kDegenerateVar) {
            GpStandardizer stdz;
            stdz.z_mean.setZero();
            for (const auto& z : Zf) stdz.z_mean += z;
            stdz.z_mean /= static_cast<double>(Zf.size());
            Vector6 var = Vector6::Zero();
            for (const auto& z : Zf) var += (z - stdz.z_mean).cwiseAbs2();
            stdz.z_scale =
                (var / static_cast<double>(Zf.size())).cwiseSqrt().cwiseMax(1e-8);
            std::vector<Vector6> Zh;
            Eigen::VectorXd yh(static_cast<int>(hyp_idx.size()));
            Zh.reserve(hyp_idx.size());
            for (size_t i = 0; i < hyp_idx.size(); ++i) {
                Zh.push_back(stdz.standardize(data[size_t(hyp_idx[i])].z));
                yh[static_cast<int>(i)] =
                    (data[size_t(hyp_idx[i])].e[ch] - ymean) / std::sqrt(yvar);
            }
            h = optimize_hyperparams(Zh, yh, split_seed + 101u * unsigned(ch), opts);
        }
        models[size_t(ch)] = GpModel::fit(Zf, yf, h);

        if (report) {
            Eigen::VectorXd pred(static_cast<int>(test_idx.size()));
            Eigen::VectorXd truth(static_cast<int>(test_idx.size()));
            for (size_t i = 0; i < test_idx.size(); ++i) {
                double mu, var2;
                models[size_t(ch)].predict(data[size_t(test_idx[i])].z, mu, var2);
                pred[static_cast<int>(i)] = mu;
                truth[static_cast<int>(i)] = data[size_t(test_idx[i])].e[ch];
            }
            report->test_r2[ch] = r2_score(pred, truth);
        }
    }
    return models;
}

double r2_score(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truths) {
    if (predictions.size() != truths.size() || truths.size() < 2)
        throw std::invalid_argument("r2_score: need equal lengths >= 2");
    const double mean = truths.mean();
    const double ss_tot = (truths.array() - mean).square().sum();
    const double ss_res = (truths - predictions).squaredNorm();
    if (ss_tot <= 0.0)
        return ss_res <= 0.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN();
    return 1.0 - ss_res / ss_tot;
}

namespace {

nlohmann::json model_to_json(const GpModel& m) {
    nlohmann::json j;
    j["constant"] = m.constant();
    const auto& s = m.standardizer();
    j["std"] = {{"z_mean", std::vector<double>(s.z_mean.data(), s.z_mean.data() + 6)},
                {"z_scale", std::vector<double>(s.z_scale.data(), s.z_scale.data() + 6)},
                {"y_mean", s.y_mean},
                {"y_scale", s.y_scale}};
    const auto& h = m.hyperparams();
    j["hyper"] = {
        {"constant_variance", h.constant_variance},
        {"length_scales",
         std::vector<double>(h.length_scales.data(), h.length_scales.data() + 6)},
        {"noise_variance", h.noise_variance}};
    nlohmann::json Z = nlohmann::json::array();
    for (const auto& z : m.training_inputs())
        Z.push_back(std::vector<double>(z.data(), z.data() + 6));
    j["Z"] = std::move(Z);
    const auto& y = m.training_targets();
    j["y"] = std::vector<double>(y.data(), y.data() + y.size());
    return j;
}

GpModel model_from_json(const nlohmann::json& j) {
    GpStandardizer s;
    const auto zm = j.at("std").at("z_mean").get<std::vector<double>>();
    const auto zs = j.at("std").at("z_scale").get<std::vector<double>>();
    if (zm.size() != 6 || zs.size() != 6)
        throw std::runtime_error("gp model file: bad standardizer size");
    for (int d = 0; d < 6; ++d) {
        s.z_mean[d] = zm[size_t(d)];
        s.z_scale[d] = zs[size_t(d)];
    }
    s.y_mean = j.at("std").at("y_mean").get<double>();
    s.y_scale = j.at("std").at("y_scale").get<double>();

    GpHyperparams h;
    h.constant_variance = j.at("hyper").at("constant_variance").get<double>();
    const auto ls = j.at("hyper").at("length_scales").get<std::vector<double>>();
    if (ls.size() != 6) throw std::runtime_error("gp model file: bad length scales");
    for (int d = 0; d < 6; ++d) h.length_scales[d] = ls[size_t(d)];
    h.noise_variance = j.at("hyper").at("noise_variance").get<double>();

    const bool constant = j.at("constant").get<bool>();
    std::vector<Vector6> Z;
    for (const auto& row : j.at("Z")) {
        const auto v = row.get<std::vector<double>>();
        if (v.size() != 6) throw std::runtime_error("gp model file: bad input row");
        Vector6 z;
        for (int d = 0; d < 6; ++d) z[d] = v[size_t(d)];
        Z.push_back(z);
    }
    const auto yv = j.at("y").get<std::vector<double>>();
    Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(yv.data(), long(yv.size()));
    if (!constant && y.size() != static_cast<long>(Z.size()))
        throw std::runtime_error("gp model file: Z/y size mismatch");
    return GpModel::from_fields(s, h, std::move(Z), std::move(y), constant);
}

}  // namespace

void save_gp_models(const std::array<GpModel, 4>& models, const std::string& path) {
    nlohmann::json j;
    j["format"] = "lmpc-gp";
    j["version"] = 1;
    j["models"] = nlohmann::json::array();
    for (const auto& m : models) j["models"].push_back(model_to_json(m));
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_gp_models: cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("save_gp_models: write failed for " + path);
}

std::array<GpModel, 4> load_gp_models(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_gp_models: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "lmpc-gp" || j.value("version", 0) != 1)
        throw std::runtime_error("load_gp_models: unsupported file format in " + path);
    const auto& arr = j.at("models");
    if (arr.size() != 4) throw std::runtime_error("load_gp_models: expected 4 models");
    std::array<GpModel, 4> models;
    for (size_t i = 0; i < 4; ++i) models[i] = model_from_json(arr[i]);
    return models;
}

}  // namespace lmpc
