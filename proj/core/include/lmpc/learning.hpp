// Gaussian-process regression of the per-channel one-step model mismatch
// between the plant and the reduced prediction model. Kernel: constant x
// anisotropic RBF + white noise; hyperparameters fit by maximizing the log
// marginal likelihood with multi-start gradient ascent.

#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmpc/dynamics.hpp"

namespace lmpc {

using Vector6 = Eigen::Matrix<double, 6, 1>;

// One supervised sample: input (X, Y, psi, v, delta, D), target is the
// 4-channel one-step prediction error of the reduced model.
struct MismatchSample {
    Vector6 z;
    Eigen::Vector4d e;
};
using MismatchDataset = std::vector<MismatchSample>;

// Builds the dataset from consecutive plant states and applied inputs on a
// uniform Ts grid. Rows whose time gap deviates from Ts by more than 10% are
// skipped (trace gaps).
MismatchDataset collect_mismatch(const std::vector<double>& time,
                                 const std::vector<FullState>& plant,
                                 const std::vector<ControlInput>& input,
                                 const VehicleParams& params, double Ts);

struct GpHyperparams {
    double constant_variance{1.0};
    Vector6 length_scales{Vector6::Ones()};
    double noise_variance{1e-2};  // sigma_n^2
};

// Covariance between two (standardized) inputs; adds sigma_n^2 iff the two
// points are bitwise identical (Kronecker delta on repeated points).
double kernel(const Vector6& a, const Vector6& b, const GpHyperparams& h);

struct GpStandardizer {
    Vector6 z_mean{Vector6::Zero()};
    Vector6 z_scale{Vector6::Ones()};
    double y_mean{0.0};
    double y_scale{1.0};

    Vector6 standardize(const Vector6& z) const {
        return (z - z_mean).cwiseQuotient(z_scale);
    }
};

class GpModel {
public:
    GpModel() = default;

    // Standardizes on the given data, factorizes K + sigma_n^2 I, and stores
    // the dual weights. Z is raw (unstandardized) inputs.
    static GpModel fit(const std::vector<Vector6>& Z, const Eigen::VectorXd& y,
                       const GpHyperparams& h);

    // Rebuilds from stored fields (training internals and persistence);
    // Z_std and y_std are in standardized units.
    static GpModel from_fields(const GpStandardizer& stdz, const GpHyperparams& h,
                               std::vector<Vector6> Z_std, Eigen::VectorXd y_std,
                               bool constant);

    // Posterior mean and latent variance (no observation noise), in raw units.
    void predict(const Vector6& z, double& mean, double& variance) const;

    // Posterior mean and its gradient with respect to the raw input
    // (analytic for the RBF kernel; zero for constant models).
    void predict_gradient(const Vector6& z, double& mean, Vector6& grad) const;

    bool trained() const { return constant_ || !Z_.empty(); }
    bool constant() const { return constant_; }
    int n_train() const { return static_cast<int>(Z_.size()); }
    const GpHyperparams& hyperparams() const { return hyper_; }
    const GpStandardizer& standardizer() const { return std_; }
    double log_marginal_likelihood() const { return lml_; }
    const std::vector<Vector6>& training_inputs() const { return Z_; }  // standardized
    const Eigen::VectorXd& training_targets() const { return y_; }      // standardized

private:
    void finalize();  // factorize and compute dual weights + LML

    GpStandardizer std_;
    GpHyperparams hyper_;
    std::vector<Vector6> Z_;  // standardized training inputs
    Eigen::VectorXd y_;       // standardized training targets
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::VectorXd alpha_;
    double lml_{0.0};
    bool constant_{false};  // degenerate target: predicts the mean, zero variance
};

struct GpTrainOptions {
    double train_fraction{0.85};
    int multistarts{8};
    int max_opt_iter{200};
    int hyperfit_subsample{150};  // LML fit on at most this many points
    int max_train_points{2000};   // final factorization cap
};

struct GpTrainReport {
    Eigen::Vector4d test_r2{Eigen::Vector4d::Zero()};
    int n_train{0};
    int n_test{0};
};

// Random 85/15 split with the given seed, per-channel hyperparameter fit,
// returns the four channel models (X, Y, psi, v) and held-out R^2.
std::array<GpModel, 4> train_gp(const MismatchDataset& data, unsigned split_seed,
                                const GpTrainOptions& opts = {},
                                GpTrainReport* report = nullptr);

// Multistart gradient ascent on the log marginal likelihood over standardized
// data; each restart is monotone (accept-only-improve), the best final value
// wins. Exposed for property checks and custom pipelines.
GpHyperparams optimize_hyperparams(const std::vector<Vector6>& Z_std,
                                   const Eigen::VectorXd& y_std, unsigned seed,
                                   const GpTrainOptions& opts = {});

// 1 - SS_res/SS_tot. Zero-variance truths: 1 when residuals vanish, NaN
// (undefined) otherwise.
double r2_score(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truths);

// JSON persistence with a versioned header; round trips exactly.
void save_gp_models(const std::array<GpModel, 4>& models, const std::string& path);
std::array<GpModel, 4> load_gp_models(const std::string& path);

}  // namespace lmpc
