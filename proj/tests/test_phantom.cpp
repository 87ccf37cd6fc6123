#include <doctest.h>

#include <cmath>
#include <vector>

#include "ect/phantom.hpp"
#include "test_helpers.hpp"

using namespace ect;

TEST_CASE("single microsphere area matches the analytic disk area") {
    PhantomSpec spec;  // default 100x200 window
    spec.count_min = spec.count_max = 1;
    spec.radius_min = spec.radius_max = 15.0;
    spec.depth_min = 20.0;
    spec.depth_max = 80.0;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const PermittivityImage img = gen_phantom(spec, seed);
        double mass = 0.0;
        for (double v : img.values()) mass += v;
        const double area = M_PI * 15.0 * 15.0;
        const double half_perimeter = M_PI * 15.0;
        CHECK(std::abs(mass - area) < half_perimeter);
    }
}

TEST_CASE("phantom values stay in range and generation is deterministic") {
    const PhantomSpec spec = test::small_microspheres();
    const PermittivityImage a = gen_phantom(spec, 99);
    const PermittivityImage b = gen_phantom(spec, 99);
    CHECK(a.values() == b.values());
    CHECK(a.in_unit_range());

    PhantomSpec film;
    film.kind = PhantomKind::biofilm;
    const PermittivityImage c = gen_phantom(film, 7);
    const PermittivityImage d = gen_phantom(film, 7);
    CHECK(c.values() == d.values());
    CHECK(c.in_unit_range());
}

TEST_CASE("flat biofilm rows are constant along y") {
    PhantomSpec film;
    film.kind = PhantomKind::biofilm;
    film.roughness_amp_min = film.roughness_amp_max = 0.0;
    const PermittivityImage img = gen_phantom(film, 5);
    for (int r = 0; r < img.height(); ++r)
        for (int c = 1; c < img.width(); ++c) CHECK(img.at(r, c) == img.at(r, 0));
    // film is attached to the sensor: full rows at the top of the depth axis
    CHECK(img.at(0, 0) == 1.0);
}

TEST_CASE("impossible placements raise a generation error") {
    PhantomSpec spec;
    spec.count_min = spec.count_max = 3;
    spec.radius_min = spec.radius_max = 45.0;
    spec.depth_min = 5.0;
    spec.depth_max = 80.0;
    CHECK_THROWS_AS(gen_phantom(spec, 1), GenerationError);
}

TEST_CASE("microspheres are non-overlapping") {
    // disjoint disks of value 1 plus anti-aliased rims: total mass must equal
    // the sum of the individual disk areas, which overlap would reduce
    PhantomSpec spec;
    spec.count_min = spec.count_max = 3;
    spec.radius_min = 10.0;
    spec.radius_max = 12.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const PermittivityImage img = gen_phantom(spec, seed);
        double mass = 0.0;
        for (double v : img.values()) mass += v;
        // three disks of radius >= 10 um
        CHECK(mass > 3 * M_PI * 10.0 * 10.0 - 3 * M_PI * 12.0);
    }
}

TEST_CASE("noise application") {
    CapacitanceMatrix c(5, 20);
    for (int row = 0; row < c.m; ++row)
        for (int i = 0; i < c.n; ++i)
            if (!c.is_padded(row, i)) c.at(row, i) = 0.5;

    SUBCASE("zero std is the identity") {
        const CapacitanceMatrix out = add_noise(c, NoiseModel{0.0}, 5);
        CHECK(out.values == c.values);
    }

    SUBCASE("padded entries stay zero") {
        const CapacitanceMatrix out = add_noise(c, NoiseModel{0.03}, 5);
        for (int row = 0; row < c.m; ++row)
            for (int i = 0; i < c.n; ++i)
                if (c.is_padded(row, i)) CHECK(out.at(row, i) == 0.0);
    }

    SUBCASE("sample std and distribution shape at 1e5 draws") {
        std::vector<double> draws;
        draws.reserve(100000);
        std::uint64_t seed = 0;
        while (draws.size() < 100000) {
            const CapacitanceMatrix out = add_noise(c, NoiseModel{0.03}, seed++);
            for (int row = 0; row < c.m; ++row)
                for (int i = 0; i < c.n; ++i)
                    if (!c.is_padded(row, i) && draws.size() < 100000)
                        draws.push_back(out.at(row, i) - 0.5);
        }
        double mean = 0.0;
        for (double d : draws) mean += d;
        mean /= draws.size();
        double var = 0.0;
        for (double d : draws) var += (d - mean) * (d - mean);
        var /= (draws.size() - 1);
        const double std_dev = std::sqrt(var);
        CHECK(std_dev > 0.029);
        CHECK(std_dev < 0.031);

        // Kolmogorov-Smirnov against N(0, 0.03^2); D < c(0.01)/sqrt(n)
        std::sort(draws.begin(), draws.end());
        double d_stat = 0.0;
        const double n = static_cast<double>(draws.size());
        for (std::size_t k = 0; k < draws.size(); ++k) {
            const double cdf = 0.5 * (1.0 + std::erf(draws[k] / (0.03 * std::sqrt(2.0))));
            d_stat = std::max(d_stat, std::abs(cdf - (k + 1) / n));
            d_stat = std::max(d_stat, std::abs(cdf - k / n));
        }
        CHECK(d_stat < 1.628 / std::sqrt(n));
    }
}
