#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>

namespace prime {

/// Lower clamp on diffusion time used when sampling t for the loss, keeping
/// the 1/(1-α_t) weight finite.
inline constexpr double kDefaultTMin = 1e-4;

/// Masking schedule α_t: the probability that a (sub-)token is still unmasked
/// at time t. Strictly decreasing on [0,1] with α_0 = 1 and α_1 = 0.
class Schedule {
public:
    enum class Kind { linear, polynomial };

    static Schedule linear() { return Schedule(Kind::linear, 1.0); }
    static Schedule polynomial(double power) {
        if (!(power > 0.0)) throw std::invalid_argument("polynomial schedule power must be positive");
        return Schedule(Kind::polynomial, power);
    }

    Kind kind() const noexcept { return kind_; }
    double power() const noexcept { return power_; }

    double alpha(double t) const {
        check(t);
        if (kind_ == Kind::linear) return 1.0 - t;
        return std::pow(1.0 - t, power_);
    }

    double alpha_prime(double t) const {
        check(t);
        if (kind_ == Kind::linear) return -1.0;
        if (power_ == 1.0) return -1.0;
        return -power_ * std::pow(1.0 - t, power_ - 1.0);
    }

    /// α'_t / (1 - α_t), with t clamped to [t_min, 1]. Negative.
    double loss_weight(double t, double t_min = kDefaultTMin) const {
        check(t);
        t = std::max(t, t_min);
        return alpha_prime(t) / (1.0 - alpha(t));
    }

    /// I(x_t; x_0) = α_t · H(x_0).
    double mutual_info(double t, double entropy_h0) const {
        if (entropy_h0 < 0.0) throw std::invalid_argument("entropy must be nonnegative");
        return alpha(t) * entropy_h0;
    }

    /// "linear", "poly3", "poly2.5", ...
    std::string name() const {
        if (kind_ == Kind::linear) return "linear";
        std::string p = std::to_string(power_);
        p.erase(p.find_last_not_of('0') + 1);
        if (!p.empty() && p.back() == '.') p.pop_back();
        return "poly" + p;
    }

    friend bool operator==(const Schedule&, const Schedule&) = default;

private:
    Schedule(Kind kind, double power) : kind_(kind), power_(power) {}

    static void check(double t) {
        if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("schedule time must lie in [0, 1]");
    }

    Kind kind_;
    double power_;
};

/// Name -> schedule factories. New kinds register here; every kind provides an
/// analytic derivative.
inline std::map<std::string, std::function<Schedule()>>& schedule_registry() {
    static std::map<std::string, std::function<Schedule()>> registry{
        {"linear", [] { return Schedule::linear(); }},
        {"cubic", [] { return Schedule::polynomial(3.0); }},
    };
    return registry;
}

/// Parses "linear", a registered name, or "poly<p>" (e.g. "poly3").
inline Schedule parse_schedule(const std::string& name) {
    auto& reg = schedule_registry();
    if (auto it = reg.find(name); it != reg.end()) return it->second();
    if (name.rfind("poly", 0) == 0 && name.size() > 4) {
        std::size_t used = 0;
        double p = 0.0;
        try {
            p = std::stod(name.substr(4), &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == name.size() - 4) return Schedule::polynomial(p);
    }
    throw std::invalid_argument("unknown schedule '" + name + "'");
}

}  // namespace prime
