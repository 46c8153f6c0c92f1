# Conical tank level control: nonlinear/linear MPC and closed-loop simulation
