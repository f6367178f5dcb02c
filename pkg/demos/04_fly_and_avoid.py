#!/usr/bin/env python
# Closed-loop flight with the left/right flow-balance controller in the
# open and cluttered rooms. Writes top-view plots as PPM.

from nanoflownet.control import ControllerConfig
from nanoflownet.sim import (EpisodeConfig, cluttered_world, count_avoidances, open_world,
                             random_start, run_episode)

ctrl = ControllerConfig()

for name, make, seconds in (("open", open_world, 120.0), ("cluttered", cluttered_world, 60.0)):
    for seed in range(3):
        world = random_start(make(), seed)
        tr = run_episode(world, ctrl, EpisodeConfig(max_time=seconds, seed=seed))
        print("%-9s seed %d  flew %5.1fs  collision %-5s  avoidances %d  saturated %.0f%%"
              % (name, seed, tr.duration, tr.collided, count_avoidances(tr),
                 100 * (abs(tr.yaw_rate) >= ctrl.max_yaw_rate - 1e-9).mean()))
        tr.save_plot("demo_%s_%d.ppm" % (name, seed))

# without gyro derotation the yaw-induced flow feeds back into the error
tr = run_episode(random_start(cluttered_world(), 0), ctrl, EpisodeConfig(max_time=30.0, derotate=False))
print("no derotation: mean |yaw rate| %.2f rad/s" % abs(tr.yaw_rate).mean())
