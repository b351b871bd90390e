#include "lmpc/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lmpc {

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

void NoiseSigmas::validate() const {
    if ((sigma_y.array() < 0.0).any() || (sigma_u.array() < 0.0).any())
        throw std::invalid_argument("NoiseSigmas: sigmas must be nonnegative");
}

NoiseGenerator::NoiseGenerator(unsigned seed, NoiseSigmas sigmas) : sigmas_(sigmas) {
    sigmas_.validate();
    for (size_t i = 0; i < eng_.size(); ++i)
        eng_[i].seed(uint64_t(seed) * 6007u + 101u * uint64_t(i) + 13u);
}

ReducedState NoiseGenerator::measure_state(const ReducedState& y) {
    ReducedState out = y;
    double* f[4] = {&out.X, &out.Y, &out.psi, &out.v};
    for (int i = 0; i < 4; ++i)
        if (sigmas_.sigma_y[i] > 0.0)
            *f[i] += sigmas_.sigma_y[i] * unit_(eng_[size_t(i)]);
    return out;
}

ControlInput NoiseGenerator::measure_input(const ControlInput& u) {
    ControlInput out = u;
    double* f[2] = {&out.delta, &out.D};
    for (int i = 0; i < 2; ++i)
        if (sigmas_.sigma_u[i] > 0.0)
            *f[i] += sigmas_.sigma_u[i] * unit_(eng_[size_t(4 + i)]);
    return out;
}

void SimConfig::validate() const {
    nmpc.validate();
    mhe.validate();
    noise.validate();
    if (laps < 1) throw std::invalid_argument("SimConfig: laps must be >= 1");
    if (plant_substeps < 1)
        throw std::invalid_argument("SimConfig: plant_substeps must be >= 1");
    if (max_lap_time <= 0.0)
        throw std::invalid_argument("SimConfig: max_lap_time must be positive");
    if (!(speed_scale > 0.0 && speed_scale <= 1.0))
        throw std::invalid_argument("SimConfig: speed_scale must be in (0, 1]");
    if (controller == ControllerKind::LMpc &&
        (training_laps < 1 || training_laps >= laps))
        throw std::invalid_argument(
            "SimConfig: l-mpc needs 1 <= training_laps < laps");
}

SimTrace run_closed_loop(const TrackGeometry& track, const RaceLine& raceline,
                         const SimConfig& cfg, const VehicleParams& params) {
    cfg.validate();
    params.validate();
    if (raceline.empty()) throw std::invalid_argument("run_closed_loop: empty race line");

    const double Ts = cfg.nmpc.Ts;
    const double L = track.length();
    RaceLine derated = raceline;
    for (auto& s : derated.samples) s.v *= cfg.speed_scale;
    NmpcController ctl(derated, track, cfg.nmpc, params);
    MovingHorizonEstimator mhe(cfg.mhe, params);
    NoiseGenerator noise(cfg.seed, cfg.noise);

    SimTrace tr;
    tr.Ts = Ts;

    // rolling start on the race line's first sample
    const RaceLineSample& s0 = derated.samples.front();
    FullState plant{s0.X, s0.Y, s0.psi, std::max(s0.v, 0.5), 0.0, 0.0};

    // unwrapped progress; start near zero (may be epsilon-negative)
    double theta = std::remainder(track.project(plant.X, plant.Y), L);
    const double theta_start = theta;

    ControlInput u{};
    bool trained = false;
    const int max_steps = int(cfg.laps * cfg.max_lap_time / Ts) + 10;

    for (int k = 0; k < max_steps; ++k) {
        SimStepRow row;
        row.t = k * Ts;
        row.plant = plant;

        const ReducedState y = reduce_state(plant);
        row.measured = noise.measure_state(y);
        row.measured_input = noise.measure_input(u);

        if (cfg.use_mhe) {
            mhe.push_measurement(row.measured, row.measured_input);
            const MheResult est = mhe.estimate();
            row.estimated = est.x_hat;
            row.mhe_time = est.solve_time;
            row.mhe_degraded = est.degraded ? 1 : 0;
        } else {
            row.estimated = row.measured;
        }

        NmpcDiagnostics diag;
        row.commanded = ctl.step(row.estimated, &diag);
        row.nmpc_time = diag.solve_time;
        row.nmpc_degraded = diag.degraded ? 1 : 0;
        row.reference = diag.reference;
        row.ref_theta = diag.ref_theta;

        // progress and containment at plant granularity
        const double proj = track.project(plant.X, plant.Y, track.wrap(theta));
        theta += std::remainder(proj - track.wrap(theta), L);
        row.theta = theta;
        row.contour_error = track.contour_error(plant.X, plant.Y, track.wrap(theta));
        const int lap =
            std::max(0, int(std::floor((theta - theta_start) / L + 1e-9)));
        row.lap = lap;
        tr.rows.push_back(row);

        if (std::abs(row.contour_error) > track.half_width(track.wrap(theta))) {
            tr.aborted = true;
            std::ostringstream os;
            os << "vehicle left the track at t=" << row.t << " s, theta=" << theta;
            tr.abort_reason = os.str();
            return tr;
        }

        if (lap > tr.laps_completed) tr.laps_completed = lap;
        if (tr.laps_completed >= cfg.laps) return tr;

        if (cfg.controller == ControllerKind::LMpc && !trained &&
            lap >= cfg.training_laps) {
            // train on everything logged during the baseline laps
            std::vector<double> time;
            std::vector<FullState> states;
            std::vector<ControlInput> inputs;
            for (const auto& r : tr.rows) {
                time.push_back(r.t);
                states.push_back(r.plant);
                inputs.push_back(r.commanded);
            }
            const MismatchDataset data =
                collect_mismatch(time, states, inputs, params, Ts);
            if (data.size() < 20) {
                tr.aborted = true;
                tr.abort_reason = "insufficient mismatch data for GP training";
                return tr;
            }
            ctl.attach_correction(train_gp(data, cfg.seed, cfg.gp));
            trained = true;
        }

        if (row.t > double(lap + 1) * cfg.max_lap_time) {
            tr.aborted = true;
            tr.abort_reason = "lap watchdog expired";
            return tr;
        }

        // plant integration under the applied input
        u = row.commanded;
        const double h = Ts / cfg.plant_substeps;
        if (cfg.reduced_plant) {
            Eigen::Vector4d x{plant.X, plant.Y, plant.psi, plant.vx};
            for (int i = 0; i < cfg.plant_substeps; ++i)
                x = reduced_rk4_step(ReducedState::from_vec(x), u, params, h);
            plant = FullState{x[0], x[1], x[2], x[3], 0.0,
                              (x[2] - plant.psi) / Ts};
        } else {
            Eigen::Matrix<double, 6, 1> x = plant.vec();
            for (int i = 0; i < cfg.plant_substeps; ++i)
                x = full_rk4_step(FullState::from_vec(x), u, params, h);
            plant = FullState::from_vec(x);
        }
        if (!plant.vec().allFinite()) {
            tr.aborted = true;
            tr.abort_reason = "plant state diverged";
            return tr;
        }
    }
    tr.aborted = true;
    tr.abort_reason = "step watchdog expired";
    return tr;
}

namespace {

LapMetrics aggregate(int lap, const std::vector<const SimStepRow*>& rows,
                     const RaceLineLookup& lut, double Ts) {
    LapMetrics m;
    m.lap = lap;
    double ss_tot = 0.0, ss_lat = 0.0, ss_lon = 0.0;
    std::vector<double> nmpc, mhe;
    const SimStepRow* prev = nullptr;
    for (const SimStepRow* r : rows) {
        const double phi = lut.heading(r->ref_theta);
        const Eigen::Vector2d t(std::cos(phi), std::sin(phi));
        const Eigen::Vector2d n(std::sin(phi), -std::cos(phi));
        const Eigen::Vector2d err(r->plant.X - r->reference.X,
                                  r->plant.Y - r->reference.Y);
        ss_tot += err.squaredNorm();
        ss_lat += std::pow(err.dot(n), 2);
        ss_lon += std::pow(err.dot(t), 2);
        m.max_speed = std::max(m.max_speed, std::hypot(r->plant.vx, r->plant.vy));
        if (prev)
            m.distance += std::hypot(r->plant.X - prev->plant.X,
                                     r->plant.Y - prev->plant.Y);
        prev = r;
        nmpc.push_back(r->nmpc_time);
        mhe.push_back(r->mhe_time);
    }
    const double n_rows = double(rows.size());
    m.rmse_total = std::sqrt(ss_tot / n_rows);
    m.rmse_lateral = std::sqrt(ss_lat / n_rows);
    m.rmse_longitudinal = std::sqrt(ss_lon / n_rows);
    m.lap_time = n_rows * Ts;
    m.avg_speed = m.lap_time > 0.0 ? m.distance / m.lap_time : 0.0;
    m.nmpc_median = median(nmpc);
    m.nmpc_mean = mean(nmpc);
    m.mhe_median = median(mhe);
    m.mhe_mean = mean(mhe);
    return m;
}

}  // namespace

Metrics compute_metrics(const SimTrace& trace, const RaceLine& raceline) {
    if (trace.rows.empty())
        throw std::invalid_argument("compute_metrics: empty trace");
    const RaceLineLookup lut(raceline);

    Metrics out;
    int max_lap = 0;
    for (const auto& r : trace.rows) max_lap = std::max(max_lap, r.lap);
    for (int lap = 0; lap <= max_lap; ++lap) {
        std::vector<const SimStepRow*> rows;
        for (const auto& r : trace.rows)
            if (r.lap == lap) rows.push_back(&r);
        if (!rows.empty()) out.per_lap.push_back(aggregate(lap, rows, lut, trace.Ts));
    }
    std::vector<const SimStepRow*> all;
    for (const auto& r : trace.rows) all.push_back(&r);
    out.total = aggregate(-1, all, lut, trace.Ts);
    return out;
}

void export_trace(const SimTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("export_trace: cannot write " + path);
    out.precision(17);
    out << "# Ts=" << trace.Ts << "\n";
    out << "# laps_completed=" << trace.laps_completed << "\n";
    out << "# aborted=" << (trace.aborted ? 1 : 0) << "\n";
    out << "# abort_reason=" << trace.abort_reason << "\n";
    out << "t,plant_x,plant_y,plant_psi,plant_vx,plant_vy,plant_omega,"
           "meas_x,meas_y,meas_psi,meas_v,est_x,est_y,est_psi,est_v,"
           "ref_x,ref_y,ref_psi,ref_v,ref_theta,cmd_delta,cmd_D,"
           "meas_delta,meas_D,nmpc_time,mhe_time,nmpc_degraded,mhe_degraded,"
           "contour_error,theta,lap\n";
    for (const auto& r : trace.rows) {
        out << r.t << "," << r.plant.X << "," << r.plant.Y << "," << r.plant.psi << ","
            << r.plant.vx << "," << r.plant.vy << "," << r.plant.omega << ","
            << r.measured.X << "," << r.measured.Y << "," << r.measured.psi << ","
            << r.measured.v << "," << r.estimated.X << "," << r.estimated.Y << ","
            << r.estimated.psi << "," << r.estimated.v << "," << r.reference.X << ","
            << r.reference.Y << "," << r.reference.psi << "," << r.reference.v << ","
            << r.ref_theta << "," << r.commanded.delta << "," << r.commanded.D << ","
            << r.measured_input.delta << "," << r.measured_input.D << ","
            << r.nmpc_time << "," << r.mhe_time << "," << r.nmpc_degraded << ","
            << r.mhe_degraded << "," << r.contour_error << "," << r.theta << ","
            << r.lap << "\n";
    }
    if (!out) throw std::runtime_error("export_trace: write failed for " + path);
}

SimTrace import_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("import_trace: cannot open " + path);
    SimTrace tr;
    std::string line;
    // four metadata lines then the header
    for (int i = 0; i < 4; ++i) {
        if (!std::getline(in, line) || line.rfind("# ", 0) != 0)
            throw std::runtime_error("import_trace: bad metadata in " + path);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("import_trace: bad metadata in " + path);
        const std::string key = line.substr(2, eq - 2);
        const std::string val = line.substr(eq + 1);
        if (key == "Ts") tr.Ts = std::stod(val);
        else if (key == "laps_completed") tr.laps_completed = std::stoi(val);
        else if (key == "aborted") tr.aborted = std::stoi(val) != 0;
        else if (key == "abort_reason") tr.abort_reason = val;
        else throw std::runtime_error("import_trace: unknown metadata key " + key);
    }
    if (!std::getline(in, line) || line.rfind("t,plant_x", 0) != 0)
        throw std::runtime_error("import_trace: bad header in " + path);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        double f[29];
        int d[2];
        char c;
        SimStepRow r;
        for (int i = 0; i < 26; ++i)
            if (!(ss >> f[i] >> c) || c != ',')
                throw std::runtime_error("import_trace: bad row in " + path);
        if (!(ss >> d[0] >> c) || c != ',' || !(ss >> d[1] >> c) || c != ',')
            throw std::runtime_error("import_trace: bad row in " + path);
        if (!(ss >> f[26] >> c) || c != ',' || !(ss >> f[27] >> c) || c != ',')
            throw std::runtime_error("import_trace: bad row in " + path);
        int lap = 0;
        if (!(ss >> lap)) throw std::runtime_error("import_trace: bad row in " + path);
        r.t = f[0];
        r.plant = {f[1], f[2], f[3], f[4], f[5], f[6]};
        r.measured = {f[7], f[8], f[9], f[10]};
        r.estimated = {f[11], f[12], f[13], f[14]};
        r.reference = {f[15], f[16], f[17], f[18]};
        r.ref_theta = f[19];
        r.commanded = {f[20], f[21]};
        r.measured_input = {f[22], f[23]};
        r.nmpc_time = f[24];
        r.mhe_time = f[25];
        r.nmpc_degraded = d[0];
        r.mhe_degraded = d[1];
        r.contour_error = f[26];
        r.theta = f[27];
        r.lap = lap;
        tr.rows.push_back(r);
    }
    return tr;
}

namespace {

void put(std::ostream& out, const std::string& prefix, const LapMetrics& m) {
    out << prefix << "rmse_total=" << m.rmse_total << "\n"
        << prefix << "rmse_lateral=" << m.rmse_lateral << "\n"
        << prefix << "rmse_longitudinal=" << m.rmse_longitudinal << "\n"
        << prefix << "max_speed=" << m.max_speed << "\n"
        << prefix << "avg_speed=" << m.avg_speed << "\n"
        << prefix << "lap_time=" << m.lap_time << "\n"
        << prefix << "distance=" << m.distance << "\n"
        << prefix << "nmpc_median=" << m.nmpc_median << "\n"
        << prefix << "nmpc_mean=" << m.nmpc_mean << "\n"
        << prefix << "mhe_median=" << m.mhe_median << "\n"
        << prefix << "mhe_mean=" << m.mhe_mean << "\n";
}

bool get_field(LapMetrics& m, const std::string& key, double value) {
    if (key == "rmse_total") m.rmse_total = value;
    else if (key == "rmse_lateral") m.rmse_lateral = value;
    else if (key == "rmse_longitudinal") m.rmse_longitudinal = value;
    else if (key == "max_speed") m.max_speed = value;
    else if (key == "avg_speed") m.avg_speed = value;
    else if (key == "lap_time") m.lap_time = value;
    else if (key == "distance") m.distance = value;
    else if (key == "nmpc_median") m.nmpc_median = value;
    else if (key == "nmpc_mean") m.nmpc_mean = value;
    else if (key == "mhe_median") m.mhe_median = value;
    else if (key == "mhe_mean") m.mhe_mean = value;
    else return false;
    return true;
}

}  // namespace

void export_metrics(const Metrics& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("export_metrics: cannot write " + path);
    out.precision(17);
    out << "laps=" << m.per_lap.size() << "\n";
    for (const auto& lap : m.per_lap) {
        std::ostringstream pre;
        pre << "lap." << lap.lap << ".";
        put(out, pre.str(), lap);
    }
    put(out, "total.", m.total);
    if (!out) throw std::runtime_error("export_metrics: write failed for " + path);
}

Metrics import_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("import_metrics: cannot open " + path);
    Metrics m;
    m.total.lap = -1;
    std::string line;
    if (!std::getline(in, line) || line.rfind("laps=", 0) != 0)
        throw std::runtime_error("import_metrics: bad schema in " + path);
    const int n_laps = std::stoi(line.substr(5));
    std::string rest;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("import_metrics: bad line in " + path);
        const std::string key = line.substr(0, eq);
        const double value = std::stod(line.substr(eq + 1));
        if (key.rfind("lap.", 0) == 0) {
            const auto dot = key.find('.', 4);
            if (dot == std::string::npos)
                throw std::runtime_error("import_metrics: bad key in " + path);
            const int lap = std::stoi(key.substr(4, dot - 4));
            if (m.per_lap.empty() || m.per_lap.back().lap != lap) {
                m.per_lap.push_back({});
                m.per_lap.back().lap = lap;
            }
            if (!get_field(m.per_lap.back(), key.substr(dot + 1), value))
                throw std::runtime_error("import_metrics: unknown key " + key);
        } else if (key.rfind("total.", 0) == 0) {
            if (!get_field(m.total, key.substr(6), value))
                throw std::runtime_error("import_metrics: unknown key " + key);
        } else {
            throw std::runtime_error("import_metrics: unknown key " + key);
        }
    }
    if (static_cast<int>(m.per_lap.size()) != n_laps)
        throw std::runtime_error("import_metrics: lap count mismatch in " + path);
    return m;
}

}  // namespace lmpc
