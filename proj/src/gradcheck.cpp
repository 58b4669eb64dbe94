#include "pbc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace pbc {

namespace {

BasicTensor<double> projection(const Shape& shape, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    BasicTensor<double> r(shape);
    for (auto& v : r.values()) v = dist(rng);
    return r;
}

BasicTensor<double> run(const Fragment& fragment, const BasicTensor<double>& input, Mode mode)
{
    BasicTensor<double> x = input;
    for (std::size_t i = 0; i < fragment.size(); ++i) x = apply(fragment[i], x, mode, nullptr, i);
    return x;
}

double objective(const Fragment& fragment, const BasicTensor<double>& input, Mode mode, const BasicTensor<double>& r)
{
    const auto y = run(fragment, input, mode);
    double sum = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) sum += r[i] * y[i];
    return sum;
}

std::size_t parameter_count(const Fragment& fragment)
{
    std::size_t n = 0;
    for (const auto& l : fragment) n += l.weight.size() + l.bias.size() + l.scale.size() + l.shift.size();
    return n;
}

} // namespace

FragmentGradients analytic_gradients(const Fragment& fragment, const BasicTensor<double>& input, Mode mode,
                                     std::uint64_t seed)
{
    std::vector<BasicTensor<double>> inputs{input};
    for (std::size_t i = 0; i < fragment.size(); ++i) inputs.push_back(apply(fragment[i], inputs.back(), mode, nullptr, i));
    BasicTensor<double> upstream = projection(inputs.back().shape(), seed);

    FragmentGradients out;
    out.layers.resize(fragment.size());
    for (std::size_t i = fragment.size(); i-- > 0;) {
        out.layers[i] = backward(fragment[i], inputs[i], upstream, mode, i);
        upstream = out.layers[i].input;
    }
    out.input = upstream;
    return out;
}

GradCheckReport finite_difference_check(const Fragment& fragment, const BasicTensor<double>& input, Mode mode,
                                        double tolerance, double step, std::uint64_t seed,
                                        const GradientTamper& tamper)
{
    if (parameter_count(fragment) > kMaxCheckedParameters)
        throw std::invalid_argument("finite_difference_check: fragment has more than " +
                                    std::to_string(kMaxCheckedParameters) + " parameters");
    FragmentGradients analytic = analytic_gradients(fragment, input, mode, seed);
    if (tamper) tamper(analytic);
    const BasicTensor<double> r = projection(run(fragment, input, mode).shape(), seed);

    GradCheckReport report;
    auto compare = [&](double a, double n, const std::string& where) {
        const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
        if (report.checked++ == 0 || err > report.max_relative_error) {
            report.max_relative_error = err;
            report.worst = where + " analytic=" + std::to_string(a) + " numeric=" + std::to_string(n);
        }
    };

    BasicTensor<double> x = input;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + step;
        const double up = objective(fragment, x, mode, r);
        x[i] = saved - step;
        const double down = objective(fragment, x, mode, r);
        x[i] = saved;
        compare(analytic.input[i], (up - down) / (2.0 * step), "input[" + std::to_string(i) + "]");
    }

    Fragment probe = fragment;
    for (std::size_t li = 0; li < probe.size(); ++li) {
        auto check_param = [&](BasicTensor<double>& param, const BasicTensor<double>& grad, const char* name) {
            for (std::size_t j = 0; j < param.size(); ++j) {
                const double saved = param[j];
                param[j] = saved + step;
                const double up = objective(probe, input, mode, r);
                param[j] = saved - step;
                const double down = objective(probe, input, mode, r);
                param[j] = saved;
                compare(grad[j], (up - down) / (2.0 * step),
                        "layer " + std::to_string(li) + " " + name + "[" + std::to_string(j) + "]");
            }
        };
        auto& layer = probe[li];
        const auto& g = analytic.layers[li];
        if (layer.spec.kind == LayerKind::conv2d) {
            check_param(layer.weight, g.weight, "weight");
            if (layer.spec.bias) check_param(layer.bias, g.bias, "bias");
        } else if (layer.spec.kind == LayerKind::batch_norm) {
            check_param(layer.scale, g.scale, "scale");
            check_param(layer.shift, g.shift, "shift");
        }
    }
    report.passed = report.max_relative_error < tolerance;
    return report;
}

} // namespace pbc
